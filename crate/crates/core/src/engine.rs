//! Layered inference over a compressed cache: prefill, the periodic decode
//! schedule, pre-eviction and forced probes.

use std::collections::BTreeMap;

use crate::cache::{CompressionPlan, EvictedRow, KvCache};
use crate::crosslayer::{index_reuse_plan, Aggregation};
use crate::error::{invalid, shape_err, Error, Result};
use crate::indexer::{IndexerKeyCache, IndexerParams, QueryFeatures};
use crate::math::{Matrix, Rng};
use crate::memory::{token_kv, LayerMemory, MemoryConfig, MemorySlowWeights};
use crate::policy::{layer_scores, score_knorm, score_random, score_snapkv, score_tova, select, HeadScores, PolicyId};
use crate::teacher::{LayerTrace, TeacherModel};

/// Everything that decides which rows survive a compression.
#[derive(Debug, Clone, PartialEq)]
pub struct EvictionSetup {
    pub plan: CompressionPlan,
    pub policy: PolicyId,
    pub aggregation: Aggregation,
    /// Consecutive layers sharing one indexer evaluation; 1 disables reuse.
    pub reuse_group: usize,
    /// Independent keep sets per kv head (heuristic policies only).
    pub per_head: bool,
}

impl Default for EvictionSetup {
    fn default() -> Self {
        Self {
            plan: CompressionPlan::default(),
            policy: PolicyId::Knorm,
            aggregation: Aggregation::None,
            reuse_group: 1,
            per_head: false,
        }
    }
}

impl EvictionSetup {
    pub fn validate(&self) -> Result<()> {
        self.plan.validate()?;
        self.policy.validate()?;
        self.aggregation.validate()?;
        if self.reuse_group == 0 {
            return invalid("reuse group size must be at least 1");
        }
        if self.per_head && !self.policy.is_heuristic() {
            return invalid("per-head selection is only available for heuristic policies");
        }
        if self.per_head && self.aggregation != Aggregation::None {
            return invalid("per-head selection cannot be combined with cross-layer aggregation");
        }
        Ok(())
    }
}

/// Byte counts of the three stores that grow or persist at inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Accounting {
    pub kv_bytes: usize,
    pub index_key_bytes: usize,
    pub memory_bytes: usize,
}

impl Accounting {
    pub fn total(&self) -> usize {
        self.kv_bytes + self.index_key_bytes + self.memory_bytes
    }
}

/// One layer's view of a single forced row.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeLayer {
    pub q_pre: Vec<f64>,
    pub o_attn: Vec<f64>,
    pub o_fused: Vec<f64>,
}

#[derive(Debug, Clone)]
struct QueryLog {
    positions: Vec<usize>,
    q: Matrix,
    q_pre: Matrix,
    x: Matrix,
}

impl QueryLog {
    fn new(q_width: usize, d_model: usize) -> Self {
        Self {
            positions: Vec::new(),
            q: Matrix::zeros(0, q_width),
            q_pre: Matrix::zeros(0, q_width),
            x: Matrix::zeros(0, d_model),
        }
    }

    fn from_trace(tr: &LayerTrace) -> Self {
        Self {
            positions: (0..tr.len()).collect(),
            q: tr.q.clone(),
            q_pre: tr.q_pre.clone(),
            x: tr.x.clone(),
        }
    }

    fn push(&mut self, pos: usize, q: &[f64], q_pre: &[f64], x: &[f64]) -> Result<()> {
        self.q.push_row(q)?;
        self.q_pre.push_row(q_pre)?;
        self.x.push_row(x)?;
        self.positions.push(pos);
        Ok(())
    }

    fn clear(&mut self) {
        *self = Self::new(self.q.cols(), self.x.cols());
    }

    fn len(&self) -> usize {
        self.positions.len()
    }

    fn tail(&self, n: usize) -> (Matrix, Vec<usize>) {
        let start = self.len().saturating_sub(n);
        let idx: Vec<usize> = (start..self.len()).collect();
        (self.q.gather_rows(&idx), self.positions[start..].to_vec())
    }
}

/// Indexer importance of `positions`: max over logged queries that can see
/// each key. Keys no query sees get `-inf`.
fn indexer_importance(
    params: &IndexerParams,
    log: &QueryLog,
    keys: &IndexerKeyCache,
    positions: &[usize],
) -> Result<Vec<f64>> {
    if log.len() == 0 {
        return Err(Error::EmptySupport);
    }
    let feats: Vec<QueryFeatures> = (0..log.len())
        .map(|s| params.query_features(log.x.row(s), log.q_pre.row(s)))
        .collect();
    positions
        .iter()
        .map(|&p| {
            let k = keys.get(p)?;
            let mut best = f64::NEG_INFINITY;
            for (f, &s) in feats.iter().zip(&log.positions) {
                if s >= p {
                    let v = params.score(f, k);
                    if v > best {
                        best = v;
                    }
                }
            }
            Ok(best)
        })
        .collect()
}

fn selectable(scores: &[f64]) -> Vec<f64> {
    scores
        .iter()
        .map(|&s| if s == f64::NEG_INFINITY { f64::MIN } else { s })
        .collect()
}

/// A teacher stack decoding over compressed per-layer caches.
#[derive(Debug, Clone)]
pub struct Engine<'a> {
    teacher: &'a TeacherModel,
    setup: EvictionSetup,
    compress: bool,
    indexers: Option<&'a [IndexerParams]>,
    memory_config: Option<MemoryConfig>,
    memories: Vec<LayerMemory>,
    cache: KvCache,
    index_keys: Vec<IndexerKeyCache>,
    logs: Vec<QueryLog>,
    next_pos: usize,
    steps: usize,
    rounds: u64,
    score_calls: usize,
    rng: Rng,
    last_scores: Vec<Vec<f64>>,
    last_written: Vec<Vec<(Vec<f64>, Vec<f64>)>>,
    evicted: Vec<Vec<usize>>,
}

impl<'a> Engine<'a> {
    pub fn new(
        teacher: &'a TeacherModel,
        setup: EvictionSetup,
        indexers: Option<&'a [IndexerParams]>,
        memory: Option<(MemoryConfig, Vec<MemorySlowWeights>)>,
    ) -> Result<Self> {
        setup.validate()?;
        let cfg = teacher.config();
        let lay = teacher.layout();
        let n = teacher.n_layers();
        if let Some(ix) = indexers {
            if ix.len() != n {
                return shape_err(format!("{} indexers for {n} layers", ix.len()));
            }
            if ix.iter().any(|p| p.u_q.cols() != lay.q_width() || p.u_k.cols() != cfg.d_model) {
                return shape_err("indexer dimensions do not match the teacher");
            }
        } else if setup.policy == PolicyId::Indexer {
            return invalid("indexer policy requires trained indexer parameters");
        }
        let (memory_config, memories) = match memory {
            Some((mc, slow)) => {
                mc.validate()?;
                if setup.per_head {
                    return invalid("per-head selection cannot feed the latent memory");
                }
                if slow.len() != n || slow.iter().any(|s| s.d_model() != cfg.d_model) {
                    return shape_err("memory slow weights do not match the teacher");
                }
                (Some(mc), slow.into_iter().map(LayerMemory::new).collect())
            }
            None => (None, Vec::new()),
        };
        let d_index = match (setup.policy, indexers) {
            (PolicyId::Indexer, Some(ix)) => Some(ix[0].config.d_index),
            _ => None,
        };
        let seed = match setup.policy {
            PolicyId::Random { seed } => seed,
            _ => 0,
        };
        Ok(Self {
            teacher,
            compress: true,
            indexers,
            memory_config,
            memories,
            cache: KvCache::new(n, lay, setup.plan.sinks, setup.plan.local_window),
            index_keys: d_index.map_or_else(Vec::new, |d| (0..n).map(|_| IndexerKeyCache::new(d)).collect()),
            logs: (0..n).map(|_| QueryLog::new(lay.q_width(), cfg.d_model)).collect(),
            next_pos: 0,
            steps: 0,
            rounds: 0,
            score_calls: 0,
            rng: Rng::new(seed),
            last_scores: vec![Vec::new(); n],
            last_written: vec![Vec::new(); n],
            evicted: vec![Vec::new(); n],
            setup,
        })
    }

    /// An engine that never compresses.
    pub fn uncompressed(teacher: &'a TeacherModel) -> Self {
        let setup = EvictionSetup {
            plan: CompressionPlan {
                ratio: 0.0,
                sinks: 0,
                local_window: 0,
                ..CompressionPlan::default()
            },
            ..EvictionSetup::default()
        };
        let mut e = Self::new(teacher, setup, None, None).expect("default setup is valid");
        e.compress = false;
        e
    }

    pub fn cache(&self) -> &KvCache {
        &self.cache
    }

    pub fn setup(&self) -> &EvictionSetup {
        &self.setup
    }

    pub fn memories(&self) -> &[LayerMemory] {
        &self.memories
    }

    pub fn next_position(&self) -> usize {
        self.next_pos
    }

    /// Compression rounds performed so far.
    pub fn rounds(&self) -> u64 {
        self.rounds
    }

    /// Indexer importance evaluations performed so far.
    pub fn score_calls(&self) -> usize {
        self.score_calls
    }

    /// Scores each layer was ranked by at the latest compression.
    pub fn last_scores(&self) -> &[Vec<f64>] {
        &self.last_scores
    }

    /// Token-level rows handed to memory at the latest compression.
    pub fn last_written(&self) -> &[Vec<(Vec<f64>, Vec<f64>)>] {
        &self.last_written
    }

    /// Every position evicted from layer `l`, in eviction order.
    pub fn evicted_positions(&self, l: usize) -> &[usize] {
        &self.evicted[l]
    }

    pub fn evicted_total(&self) -> usize {
        self.evicted.iter().map(Vec::len).sum()
    }

    /// Largest row count held by any kv head of any layer.
    pub fn max_rows(&self) -> usize {
        (0..self.cache.n_layers())
            .flat_map(|l| {
                let lc = self.cache.layer(l);
                (0..lc.n_kv_heads()).map(move |g| lc.head(g).positions.len())
            })
            .max()
            .unwrap_or(0)
    }

    pub fn accounting(&self) -> Accounting {
        Accounting {
            kv_bytes: self.cache.kv_bytes(),
            index_key_bytes: self.index_keys.iter().map(IndexerKeyCache::bytes).sum(),
            memory_bytes: self.memories.iter().map(|m| m.state.bytes()).sum(),
        }
    }

    /// Full-prompt prefill followed by one-shot compression. Returns the
    /// last layer's output rows.
    pub fn prefill(&mut self, x0: &Matrix) -> Result<Matrix> {
        let traces = self.teacher.forward(x0)?;
        self.prefill_traces(&traces, x0.rows())?;
        Ok(traces.last().expect("teacher has layers").out.clone())
    }

    /// Prefill from the first `len` rows of precomputed layer traces.
    pub fn prefill_traces(&mut self, traces: &[LayerTrace], len: usize) -> Result<()> {
        if self.next_pos != 0 {
            return invalid("prefill on a non-empty engine");
        }
        if traces.len() != self.cache.n_layers() || len == 0 || traces.iter().any(|t| t.len() < len) {
            return shape_err("traces do not cover the prompt");
        }
        for (l, tr) in traces.iter().enumerate() {
            for i in 0..len {
                self.cache.append_row(l, tr.k.row(i), tr.v.row(i), i)?;
                if let Some(ix) = self.index_params() {
                    let k = ix[l].key_feature(tr.x.row(i));
                    self.index_keys[l].append(i, &k)?;
                }
                self.logs[l].push(i, tr.q.row(i), tr.q_pre.row(i), tr.x.row(i))?;
            }
        }
        self.next_pos = len;
        if self.compress {
            self.compress_now(true)?;
        }
        Ok(())
    }

    /// Prefill that ranks every layer's rows with the indexer before they are
    /// cached; only kept rows enter the cache, evicted ones go straight to
    /// memory.
    pub fn prefill_pre_evict(&mut self, x0: &Matrix) -> Result<Matrix> {
        if self.next_pos != 0 {
            return invalid("prefill on a non-empty engine");
        }
        let ix = match (self.setup.policy, self.index_params()) {
            (PolicyId::Indexer, Some(ix)) => ix,
            _ => return invalid("pre-eviction requires the indexer policy"),
        };
        if self.setup.aggregation != Aggregation::None {
            return invalid("pre-eviction cannot aggregate across layers");
        }
        let n = x0.rows();
        let reuse = index_reuse_plan(self.cache.n_layers(), self.setup.reuse_group)?;
        let positions: Vec<usize> = (0..n).collect();
        let mut x = x0.clone();
        for l in 0..self.cache.n_layers() {
            let tr = self.teacher.forward_layer(l, x)?;
            let mut keys = IndexerKeyCache::new(ix[l].config.d_index);
            for i in 0..n {
                keys.append(i, &ix[l].key_feature(tr.x.row(i)))?;
            }
            let scores = if reuse[l] == l {
                self.score_calls += 1;
                indexer_importance(&ix[l], &QueryLog::from_trace(&tr), &keys, &positions)?
            } else {
                self.last_scores[reuse[l]].clone()
            };
            let middle = self.middle_count(&positions, true);
            let keep = if self.compress {
                select(&positions, &selectable(&scores), self.setup.plan.sinks, self.setup.plan.local_window, middle)?
            } else {
                positions.clone()
            };
            let mut kept = keep.iter().peekable();
            let mut evicted = Vec::new();
            for i in 0..n {
                if kept.peek() == Some(&&i) {
                    kept.next();
                    self.cache.append_row(l, tr.k.row(i), tr.v.row(i), i)?;
                } else {
                    evicted.push(EvictedRow {
                        position: i,
                        key: tr.k.row(i).to_vec(),
                        value: tr.v.row(i).to_vec(),
                    });
                }
            }
            self.index_keys[l] = keys;
            self.last_scores[l] = scores;
            self.absorb(l, evicted)?;
            x = tr.out;
        }
        self.next_pos = n;
        self.rounds += 1;
        Ok(x)
    }

    /// One decode step: run `x` through every layer at the next position,
    /// then compress on schedule. Returns the last layer's output row.
    pub fn step(&mut self, x: &[f64]) -> Result<Vec<f64>> {
        let pos = self.next_pos;
        let mut h = x.to_vec();
        for l in 0..self.cache.n_layers() {
            let p = self.layer_row(l, &h, pos)?;
            h = self.teacher.layers()[l].finish_row(&h, &p.o_fused);
        }
        self.next_pos += 1;
        self.steps += 1;
        if self.compress && self.setup.plan.compress_due(self.steps, self.max_rows()) {
            self.compress_now(false)?;
        }
        Ok(h)
    }

    /// Appends one row whose per-layer inputs are given (teacher forcing)
    /// and returns each layer's attention and fused outputs. Never compresses.
    pub fn probe(&mut self, layer_inputs: &[&[f64]]) -> Result<Vec<ProbeLayer>> {
        if layer_inputs.len() != self.cache.n_layers() {
            return shape_err("one input row per layer required");
        }
        let pos = self.next_pos;
        let out = layer_inputs
            .iter()
            .enumerate()
            .map(|(l, x)| self.layer_row(l, x, pos))
            .collect::<Result<Vec<_>>>()?;
        self.next_pos += 1;
        Ok(out)
    }

    fn index_params(&self) -> Option<&'a [IndexerParams]> {
        match self.setup.policy {
            PolicyId::Indexer => self.indexers,
            _ => None,
        }
    }

    fn layer_row(&mut self, l: usize, x: &[f64], pos: usize) -> Result<ProbeLayer> {
        let cfg = self.teacher.config();
        if x.len() != cfg.d_model {
            return shape_err(format!("row of {} for d_model {}", x.len(), cfg.d_model));
        }
        let layer = &self.teacher.layers()[l];
        let p = layer.project_row(x, pos, cfg);
        self.cache.append_row(l, &p.k, &p.v, pos)?;
        if let Some(ix) = self.index_params() {
            let k = ix[l].key_feature(x);
            self.index_keys[l].append(pos, &k)?;
        }
        self.logs[l].push(pos, &p.q, &p.q_pre, x)?;
        let o_attn = self.cache.layer(l).attend(&p.q, self.teacher.layout(), cfg.attn_scale())?;
        let o_fused = match &self.memory_config {
            Some(mc) => self.memories[l].fuse(mc, &o_attn, &p.q_pre),
            None => o_attn.clone(),
        };
        Ok(ProbeLayer {
            q_pre: p.q_pre,
            o_attn,
            o_fused,
        })
    }

    /// Middle rows a compression keeps, given the forced rows of `positions`.
    fn middle_count(&self, positions: &[usize], prefill: bool) -> usize {
        let plan = &self.setup.plan;
        let n = positions.len();
        let win_start = n.saturating_sub(plan.local_window);
        let forced = (0..n).filter(|&i| positions[i] < plan.sinks || i >= win_start).count();
        let budget_mid = plan.budget.saturating_sub(forced);
        if prefill {
            let n_sink = positions.iter().filter(|&&p| p < plan.sinks).count();
            plan.prefill_target(n).saturating_sub(n_sink).min(budget_mid)
        } else {
            budget_mid
        }
    }

    fn head_scores(&self, l: usize) -> Result<HeadScores> {
        let lc = self.cache.layer(l);
        let lay = self.teacher.layout();
        let scale = self.teacher.config().attn_scale();
        let log = &self.logs[l];
        match self.setup.policy {
            PolicyId::SnapKv { window, pool } => {
                if log.len() == 0 {
                    return Err(Error::EmptySupport);
                }
                let (q, pos) = log.tail(window);
                score_snapkv(&q, &pos, lc, lay, scale, pool)
            }
            PolicyId::Tova => {
                let last = log.len().checked_sub(1).ok_or(Error::EmptySupport)?;
                score_tova(log.q.row(last), log.positions[last], lc, lay, scale)
            }
            PolicyId::Knorm => Ok(score_knorm(lc)),
            PolicyId::Random { .. } => Ok(score_random(lc, &self.rng.split(self.rounds).split(l as u64))),
            PolicyId::Indexer => invalid("indexer scores are per layer"),
        }
    }

    fn compress_now(&mut self, prefill: bool) -> Result<()> {
        let n_layers = self.cache.n_layers();
        let (sinks, window) = (self.setup.plan.sinks, self.setup.plan.local_window);
        if self.setup.per_head {
            for l in 0..n_layers {
                let hs = self.head_scores(l)?;
                for (g, s) in hs.iter().enumerate() {
                    let positions = self.cache.layer(l).head(g).positions.clone();
                    let keep = select(&positions, s, sinks, window, self.middle_count(&positions, prefill))?;
                    let ev = self.cache.compact_head(l, g, &keep)?;
                    if g == 0 {
                        self.evicted[l].extend(ev.iter().map(|r| r.position));
                    }
                }
                self.last_scores[l] = layer_scores(&hs).unwrap_or_default();
                self.last_written[l].clear();
            }
        } else {
            let bundle = self.layer_bundle()?;
            let shared = self.setup.aggregation.apply(&bundle)?;
            if shared.is_some() && (1..n_layers).any(|l| self.cache.layer(l).positions() != self.cache.layer(0).positions()) {
                return invalid("cross-layer aggregation needs aligned layer positions");
            }
            for (l, own) in bundle.into_iter().enumerate() {
                let scores = shared.clone().unwrap_or(own);
                let positions = self.cache.layer(l).positions().to_vec();
                let keep = select(&positions, &selectable(&scores), sinks, window, self.middle_count(&positions, prefill))?;
                let ev = self.cache.compact(l, &keep)?;
                self.last_scores[l] = scores;
                self.absorb(l, ev)?;
            }
        }
        self.logs.iter_mut().for_each(QueryLog::clear);
        self.rounds += 1;
        Ok(())
    }

    /// Per-layer score vectors aligned with each layer's retained positions.
    fn layer_bundle(&mut self) -> Result<Vec<Vec<f64>>> {
        let n_layers = self.cache.n_layers();
        let Some(ix) = self.index_params() else {
            return (0..n_layers).map(|l| layer_scores(&self.head_scores(l)?)).collect();
        };
        let reuse = index_reuse_plan(n_layers, self.setup.reuse_group)?;
        let mut by_source: BTreeMap<usize, BTreeMap<usize, f64>> = BTreeMap::new();
        for src in 0..n_layers {
            if reuse[src] != src {
                continue;
            }
            let mut wanted: Vec<usize> = (0..n_layers)
                .filter(|&l| reuse[l] == src)
                .flat_map(|l| self.cache.layer(l).positions().iter().copied())
                .collect();
            wanted.sort_unstable();
            wanted.dedup();
            let imp = indexer_importance(&ix[src], &self.logs[src], &self.index_keys[src], &wanted)?;
            self.score_calls += 1;
            by_source.insert(src, wanted.into_iter().zip(imp).collect());
        }
        Ok((0..n_layers)
            .map(|l| {
                let m = &by_source[&reuse[l]];
                self.cache.layer(l).positions().iter().map(|p| m[p]).collect()
            })
            .collect())
    }

    fn absorb(&mut self, l: usize, evicted: Vec<EvictedRow>) -> Result<()> {
        let lay = self.teacher.layout();
        let base = self.teacher.config().rope_base;
        let mode = self.memory_config.as_ref().map(|m| m.value_mode).unwrap_or_default();
        let rows = evicted
            .iter()
            .map(|r| token_kv(&r.key, &r.value, r.position, lay, base, mode))
            .collect::<Result<Vec<_>>>()?;
        self.evicted[l].extend(evicted.iter().map(|r| r.position));
        if let Some(mc) = &self.memory_config {
            if !rows.is_empty() {
                self.memories[l].write(mc, &rows)?;
            }
        }
        self.last_written[l] = rows;
        Ok(())
    }
}

/// Outcome of compressing one prompt and forcing probe rows after it.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptRun {
    pub accounting: Accounting,
    /// Positions each layer retained after prefill compression.
    pub kept: Vec<Vec<usize>>,
    /// Scores each layer was ranked by.
    pub scores: Vec<Vec<f64>>,
    /// Token-level rows each layer handed to memory.
    pub written: Vec<Vec<(Vec<f64>, Vec<f64>)>>,
    /// `[probe][layer]` outputs over the compressed cache.
    pub probes: Vec<Vec<ProbeLayer>>,
    /// `[probe][layer]` attention outputs over the full cache.
    pub reference: Vec<Vec<Vec<f64>>>,
}

/// Prefills the first `prompt_len` rows of `traces`, compresses once, then
/// forces the remaining rows through both the compressed engine and an
/// uncompressed reference.
pub fn run_prompt(
    teacher: &TeacherModel,
    traces: &[LayerTrace],
    prompt_len: usize,
    setup: &EvictionSetup,
    indexers: Option<&[IndexerParams]>,
    memory: Option<(MemoryConfig, Vec<MemorySlowWeights>)>,
) -> Result<PromptRun> {
    let mut eng = Engine::new(teacher, setup.clone(), indexers, memory)?;
    let mut full = Engine::uncompressed(teacher);
    eng.prefill_traces(traces, prompt_len)?;
    full.prefill_traces(traces, prompt_len)?;
    let n_layers = teacher.n_layers();
    let kept = (0..n_layers).map(|l| eng.cache().layer(l).positions().to_vec()).collect();
    let accounting = eng.accounting();
    let total = traces.first().map_or(0, LayerTrace::len);
    let mut probes = Vec::new();
    let mut reference = Vec::new();
    for p in prompt_len..total {
        let rows: Vec<&[f64]> = traces.iter().map(|t| t.x.row(p)).collect();
        probes.push(eng.probe(&rows)?);
        reference.push(full.probe(&rows)?.into_iter().map(|r| r.o_attn).collect());
    }
    Ok(PromptRun {
        accounting,
        kept,
        scores: eng.last_scores().to_vec(),
        written: eng.last_written().to_vec(),
        probes,
        reference,
    })
}
