//! Learned importance scorer.
//!
//! Each query row is projected to `n_heads` small RMS-normalized heads plus a
//! per-head gate; each key row to a single RMS-normalized vector shared by
//! all heads. The score of query `s` for key `t` is
//! `sum_h gate[s, h] * relu(<q[s, h], k[t]>)`, and a key's importance is its
//! maximum score over a query set.

mod train;

pub use train::{distill_gradients, indexer_step, train_indexer, IndexerGrads, TrainLog};

use crate::error::{invalid, shape_err, Error, Result};
use crate::math::{kl_divergence, rmsnorm, Matrix, Rng};
use crate::teacher::{LayerTrace, TeacherConfig};
use crate::attention::HeadLayout;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IndexerConfig {
    pub n_heads: usize,
    pub d_index: usize,
}

impl IndexerConfig {
    /// A quarter of the teacher's query heads, each an eighth of its head dim.
    pub fn for_teacher(cfg: &TeacherConfig) -> Self {
        Self {
            n_heads: (cfg.n_heads / 4).max(1),
            d_index: (cfg.d_head() / 8).max(1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_index == 0 {
            return invalid("indexer heads and dim must be positive");
        }
        Ok(())
    }

    fn gate_scale(&self) -> f64 {
        1.0 / ((self.n_heads * self.d_index) as f64).sqrt()
    }
}

/// Slow weights of one layer's indexer.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexerParams {
    pub config: IndexerConfig,
    /// `n_heads*d_index x q_width`, applied to the flattened pre-RoPE query.
    pub u_q: Matrix,
    /// `d_index x d_model`, applied to the hidden state.
    pub u_k: Matrix,
    /// `n_heads x d_model`, applied to the hidden state.
    pub g: Matrix,
}

impl IndexerParams {
    pub fn init(config: IndexerConfig, q_width: usize, d_model: usize, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let hq = config.n_heads * config.d_index;
        Ok(Self {
            config,
            u_q: Matrix::random_normal(hq, q_width, 1.0 / (q_width as f64).sqrt(), rng),
            u_k: Matrix::random_normal(config.d_index, d_model, 1.0 / (d_model as f64).sqrt(), rng),
            g: Matrix::random_normal(config.n_heads, d_model, 1.0 / (d_model as f64).sqrt(), rng),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.u_q.is_finite() && self.u_k.is_finite() && self.g.is_finite()
    }

    pub fn query_features(&self, x: &[f64], q_pre: &[f64]) -> QueryFeatures {
        let u = self.u_q.apply(q_pre);
        let d = self.config.d_index;
        let q_hat = u.chunks(d).flat_map(rmsnorm).collect();
        let gate = self.g.apply(x).into_iter().map(|a| a * self.config.gate_scale()).collect();
        QueryFeatures { u, q_hat, gate }
    }

    pub fn key_feature(&self, x: &[f64]) -> Vec<f64> {
        rmsnorm(&self.u_k.apply(x))
    }

    /// Gated score of one query against one normalized key.
    pub fn score(&self, q: &QueryFeatures, k_hat: &[f64]) -> f64 {
        let d = self.config.d_index;
        q.q_hat
            .chunks(d)
            .zip(&q.gate)
            .map(|(qh, a)| a * relu(crate::math::dot(qh, k_hat)))
            .sum()
    }

    /// Features of every row of a sequence.
    pub fn sequence_features(&self, x: &Matrix, q_pre: &Matrix) -> Result<SequenceFeatures> {
        if x.rows() != q_pre.rows() || x.cols() != self.u_k.cols() || q_pre.cols() != self.u_q.cols() {
            return shape_err("hidden states and queries do not match the indexer");
        }
        let queries = (0..x.rows()).map(|i| self.query_features(x.row(i), q_pre.row(i))).collect();
        let mut keys = Matrix::zeros(x.rows(), self.config.d_index);
        for i in 0..x.rows() {
            keys.row_mut(i).copy_from_slice(&self.key_feature(x.row(i)));
        }
        Ok(SequenceFeatures { queries, keys })
    }
}

#[inline]
pub(crate) fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryFeatures {
    /// Projected query before normalization.
    pub u: Vec<f64>,
    pub q_hat: Vec<f64>,
    pub gate: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceFeatures {
    pub queries: Vec<QueryFeatures>,
    /// Normalized keys, one row per position.
    pub keys: Matrix,
}

/// Normalized indexer keys of every processed token; append-only.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexerKeyCache {
    positions: Vec<usize>,
    keys: Matrix,
}

impl IndexerKeyCache {
    pub fn new(d_index: usize) -> Self {
        Self {
            positions: Vec::new(),
            keys: Matrix::zeros(0, d_index),
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn append(&mut self, pos: usize, k_hat: &[f64]) -> Result<()> {
        if let Some(&last) = self.positions.last() {
            if pos <= last {
                return Err(Error::NonMonotone { last, next: pos });
            }
        }
        self.keys.push_row(k_hat)?;
        self.positions.push(pos);
        Ok(())
    }

    pub fn get(&self, pos: usize) -> Result<&[f64]> {
        self.positions
            .binary_search(&pos)
            .map(|i| self.keys.row(i))
            .map_err(|_| Error::MissingKey(pos))
    }

    pub fn bytes(&self) -> usize {
        self.keys.rows() * self.keys.cols() * std::mem::size_of::<f64>()
    }
}

/// Scores `A[q_ids, k_ids]` with the causal mask (`t > s` gives `-inf`).
/// Keys come from `key_cache` when given, otherwise from rows of `x`.
pub fn indexer_score_block(
    params: &IndexerParams,
    x: &Matrix,
    q_pre: &Matrix,
    q_ids: &[usize],
    k_ids: &[usize],
    key_cache: Option<&IndexerKeyCache>,
) -> Result<Matrix> {
    if x.rows() != q_pre.rows() {
        return shape_err("hidden states and queries differ in length");
    }
    if let Some(&i) = q_ids.iter().find(|&&i| i >= x.rows()) {
        return invalid(format!("query id {i} out of range"));
    }
    let keys: Vec<Vec<f64>> = k_ids
        .iter()
        .map(|&t| match key_cache {
            Some(c) => c.get(t).map(<[f64]>::to_vec),
            None if t < x.rows() => Ok(params.key_feature(x.row(t))),
            None => Err(Error::MissingKey(t)),
        })
        .collect::<Result<_>>()?;
    let mut a = Matrix::zeros(q_ids.len(), k_ids.len());
    for (i, &s) in q_ids.iter().enumerate() {
        let qf = params.query_features(x.row(s), q_pre.row(s));
        for (j, &t) in k_ids.iter().enumerate() {
            let v = if t > s { f64::NEG_INFINITY } else { params.score(&qf, &keys[j]) };
            a.set(i, j, v);
        }
    }
    Ok(a)
}

/// Column max of `a` over the rows listed in `q_rows`.
pub fn importance_from_scores(a: &Matrix, q_rows: &[usize]) -> Result<Vec<f64>> {
    if q_rows.is_empty() {
        return invalid("empty query set");
    }
    let mut imp = vec![f64::NEG_INFINITY; a.cols()];
    for &r in q_rows {
        for (m, &v) in imp.iter_mut().zip(a.row(r)) {
            if v > *m {
                *m = v;
            }
        }
    }
    Ok(imp)
}

/// Importance of keys `0..n_keys` over `q_set`, streamed in
/// `q_blk x k_blk` tiles with one running max per key.
pub fn importance_streamed(
    feats: &SequenceFeatures,
    params: &IndexerParams,
    q_set: &[usize],
    n_keys: usize,
    q_blk: usize,
    k_blk: usize,
) -> Result<Vec<f64>> {
    Ok(stream_max(q_set, n_keys, q_blk, k_blk, |s, t| params.score(&feats.queries[s], feats.keys.row(t)))?.0)
}

/// Running column max of `f(s, t)` over `s` in `q_set` with `s >= t`, tile
/// by tile. Also returns the lowest maximizing query per key.
pub(crate) fn stream_max(
    q_set: &[usize],
    n_keys: usize,
    q_blk: usize,
    k_blk: usize,
    mut f: impl FnMut(usize, usize) -> f64,
) -> Result<(Vec<f64>, Vec<usize>)> {
    if q_set.is_empty() {
        return invalid("empty query set");
    }
    if q_blk == 0 || k_blk == 0 {
        return invalid("block sizes must be positive");
    }
    let mut qs = q_set.to_vec();
    qs.sort_unstable();
    qs.dedup();
    let mut best = vec![f64::NEG_INFINITY; n_keys];
    let mut arg = vec![usize::MAX; n_keys];
    for k0 in (0..n_keys).step_by(k_blk) {
        let k1 = (k0 + k_blk).min(n_keys);
        for qb in qs.chunks(q_blk) {
            if *qb.last().unwrap_or(&0) < k0 {
                continue;
            }
            for &s in qb {
                for t in k0..k1.min(s + 1) {
                    let v = f(s, t);
                    if v > best[t] {
                        best[t] = v;
                        arg[t] = s;
                    }
                }
            }
        }
    }
    Ok((best, arg))
}

/// Inputs of one distillation example at one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillBatch {
    pub x: Matrix,
    pub q_pre: Matrix,
    /// Post-RoPE teacher queries and keys.
    pub q: Matrix,
    pub k: Matrix,
    pub layout: HeadLayout,
    pub scale: f64,
    pub sinks: usize,
    pub q_set: Vec<usize>,
    teacher_imp: Vec<f64>,
}

impl DistillBatch {
    pub fn new(
        x: Matrix,
        q_pre: Matrix,
        q: Matrix,
        k: Matrix,
        layout: HeadLayout,
        scale: f64,
        sinks: usize,
        q_set: Vec<usize>,
    ) -> Result<Self> {
        let n = x.rows();
        if [q_pre.rows(), q.rows(), k.rows()].iter().any(|&r| r != n) {
            return shape_err("distillation inputs differ in length");
        }
        if q.cols() != layout.q_width() || k.cols() != layout.kv_width() {
            return shape_err("teacher queries/keys do not match the head layout");
        }
        if let Some(&s) = q_set.iter().find(|&&s| s >= n) {
            return invalid(format!("query {s} outside a sequence of {n}"));
        }
        let mut b = Self {
            x,
            q_pre,
            q,
            k,
            layout,
            scale,
            sinks,
            q_set,
            teacher_imp: Vec::new(),
        };
        b.teacher_imp = b.teacher_importance(n.max(1), n.max(1))?;
        Ok(b)
    }

    /// Batch over every prompt query of a teacher layer trace.
    pub fn from_trace(trace: &LayerTrace, layout: HeadLayout, scale: f64, sinks: usize) -> Result<Self> {
        let q_set = (0..trace.len()).collect();
        Self::new(
            trace.x.clone(),
            trace.q_pre.clone(),
            trace.q.clone(),
            trace.k.clone(),
            layout,
            scale,
            sinks,
            q_set,
        )
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    pub fn teacher_imp(&self) -> &[f64] {
        &self.teacher_imp
    }

    /// Teacher importance streamed in tiles: max over heads and queries of
    /// the attention logit.
    pub fn teacher_importance(&self, q_blk: usize, k_blk: usize) -> Result<Vec<f64>> {
        let lay = self.layout;
        Ok(stream_max(&self.q_set, self.len(), q_blk, k_blk, |s, t| {
            let (qs, kt) = (self.q.row(s), self.k.row(t));
            (0..lay.n_heads)
                .map(|h| crate::math::dot(lay.head(qs, h), lay.head(kt, lay.kv_head(h))) * self.scale)
                .fold(f64::NEG_INFINITY, f64::max)
        })?
        .0)
    }

    /// Positions entering the loss: past the sinks and seen by some query.
    pub fn support(&self) -> Vec<usize> {
        (self.sinks..self.len())
            .filter(|&t| self.teacher_imp[t] > f64::NEG_INFINITY)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillOutput {
    pub loss: f64,
    pub teacher_imp: Vec<f64>,
    pub student_imp: Vec<f64>,
}

/// KL from the teacher's pooled importance distribution to the indexer's,
/// both pooled tile by tile with `O(L)` state. Sink positions are dropped.
pub fn streaming_distill_loss(
    params: &IndexerParams,
    batch: &DistillBatch,
    q_blk: usize,
    k_blk: usize,
) -> Result<DistillOutput> {
    let feats = params.sequence_features(&batch.x, &batch.q_pre)?;
    let teacher_imp = batch.teacher_importance(q_blk, k_blk)?;
    let student_imp = importance_streamed(&feats, params, &batch.q_set, batch.len(), q_blk, k_blk)?;
    let loss = masked_kl(&teacher_imp, &student_imp, batch.sinks)?;
    Ok(DistillOutput {
        loss,
        teacher_imp,
        student_imp,
    })
}

/// KL over positions at or past `sinks` that some query can see.
pub fn masked_kl(teacher: &[f64], student: &[f64], sinks: usize) -> Result<f64> {
    let keep: Vec<usize> = (sinks.min(teacher.len())..teacher.len())
        .filter(|&t| teacher[t] > f64::NEG_INFINITY)
        .collect();
    if keep.is_empty() {
        return Err(Error::EmptySupport);
    }
    let t: Vec<f64> = keep.iter().map(|&i| teacher[i]).collect();
    let s: Vec<f64> = keep.iter().map(|&i| student[i]).collect();
    kl_divergence(&t, &s)
}
