//! Per-layer key/value store with sink protection and order-preserving
//! compaction.

use crate::attention::{attend_head, HeadLayout};
use crate::error::{invalid, shape_err, Error, Result};
use crate::math::Matrix;
use crate::policy::select;

pub const DEFAULT_SINKS: usize = 4;
pub const DEFAULT_LOCAL_WINDOW: usize = 32;
pub const DEFAULT_INTERVAL: usize = 128;

/// Budget and schedule of cache compression.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressionPlan {
    /// Fraction of prefill rows evicted by one-shot compression.
    pub ratio: f64,
    /// Decode steps between periodic compressions.
    pub interval: usize,
    /// Total rows retained by a decode-time compression (sinks and window included).
    pub budget: usize,
    pub sinks: usize,
    pub local_window: usize,
}

impl Default for CompressionPlan {
    fn default() -> Self {
        Self {
            ratio: 0.5,
            interval: DEFAULT_INTERVAL,
            budget: 1024,
            sinks: DEFAULT_SINKS,
            local_window: DEFAULT_LOCAL_WINDOW,
        }
    }
}

impl CompressionPlan {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.ratio) {
            return invalid(format!("ratio {} outside [0, 1]", self.ratio));
        }
        if self.interval == 0 {
            return invalid("decode interval must be positive");
        }
        if self.budget < self.sinks + self.local_window {
            return invalid(format!(
                "budget {} below sinks {} + local window {}",
                self.budget, self.sinks, self.local_window
            ));
        }
        Ok(())
    }

    /// Rows kept by one-shot prefill compression of `len` rows before the
    /// forced rows are unioned in: `ceil((1 - r) * len)`.
    pub fn prefill_target(&self, len: usize) -> usize {
        (((1.0 - self.ratio) * len as f64) - 1e-9).ceil().max(0.0) as usize
    }

    /// Whether decode step `step` (1-based) is a compression boundary for a
    /// cache of `len` rows.
    pub fn compress_due(&self, step: usize, len: usize) -> bool {
        step % self.interval == 0 && len > self.budget
    }
}

/// Key/value rows of one kv head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadStore {
    pub keys: Matrix,
    pub values: Matrix,
    pub positions: Vec<usize>,
}

impl HeadStore {
    fn new(d_head: usize) -> Self {
        Self {
            keys: Matrix::zeros(0, d_head),
            values: Matrix::zeros(0, d_head),
            positions: Vec::new(),
        }
    }

    fn len(&self) -> usize {
        self.positions.len()
    }

    fn push(&mut self, k: &[f64], v: &[f64], pos: usize) -> Result<()> {
        if let Some(&last) = self.positions.last() {
            if pos <= last {
                return Err(Error::NonMonotone { last, next: pos });
            }
        }
        self.keys.push_row(k)?;
        self.values.push_row(v)?;
        self.positions.push(pos);
        Ok(())
    }

    fn retain(&mut self, keep: &[usize]) -> (Matrix, Matrix, Vec<usize>) {
        let mut drop = Vec::with_capacity(self.len() - keep.len());
        let mut k = keep.iter().peekable();
        for i in 0..self.len() {
            if k.peek() == Some(&&i) {
                k.next();
            } else {
                drop.push(i);
            }
        }
        let evicted = (
            self.keys.gather_rows(&drop),
            self.values.gather_rows(&drop),
            drop.iter().map(|&i| self.positions[i]).collect(),
        );
        self.keys = self.keys.gather_rows(keep);
        self.values = self.values.gather_rows(keep);
        self.positions = keep.iter().map(|&i| self.positions[i]).collect();
        evicted
    }
}

/// A row removed from the cache: post-RoPE key and value across all kv heads.
#[derive(Debug, Clone, PartialEq)]
pub struct EvictedRow {
    pub position: usize,
    pub key: Vec<f64>,
    pub value: Vec<f64>,
}

/// A row removed from a single kv head.
#[derive(Debug, Clone, PartialEq)]
pub struct EvictedHeadRow {
    pub head: usize,
    pub position: usize,
    pub key: Vec<f64>,
    pub value: Vec<f64>,
}

/// Cache of one layer. In per-layer mode every kv head holds the same
/// positions; per-head compaction lets them diverge.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCache {
    d_head: usize,
    heads: Vec<HeadStore>,
}

impl LayerCache {
    pub fn new(n_kv_heads: usize, d_head: usize) -> Self {
        Self {
            d_head,
            heads: (0..n_kv_heads).map(|_| HeadStore::new(d_head)).collect(),
        }
    }

    pub fn n_kv_heads(&self) -> usize {
        self.heads.len()
    }

    /// Rows retained by kv head 0.
    pub fn len(&self) -> usize {
        self.heads[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn head(&self, g: usize) -> &HeadStore {
        &self.heads[g]
    }

    /// Positions retained by kv head 0.
    pub fn positions(&self) -> &[usize] {
        &self.heads[0].positions
    }

    /// True when every kv head retains the same positions.
    pub fn is_uniform(&self) -> bool {
        self.heads.iter().all(|h| h.positions == self.heads[0].positions)
    }

    pub fn total_rows(&self) -> usize {
        self.heads.iter().map(HeadStore::len).sum()
    }

    /// Concatenated key row `i` across kv heads (per-layer mode).
    pub fn key_row(&self, i: usize) -> Vec<f64> {
        self.heads.iter().flat_map(|h| h.keys.row(i).iter().copied()).collect()
    }

    pub fn value_row(&self, i: usize) -> Vec<f64> {
        self.heads.iter().flat_map(|h| h.values.row(i).iter().copied()).collect()
    }

    pub fn append_row(&mut self, k: &[f64], v: &[f64], pos: usize) -> Result<()> {
        let w = self.heads.len() * self.d_head;
        if k.len() != w || v.len() != w {
            return shape_err(format!("kv rows of {}/{} for width {w}", k.len(), v.len()));
        }
        if let Some(&last) = self.heads.iter().filter_map(|h| h.positions.last()).max() {
            if pos <= last {
                return Err(Error::NonMonotone { last, next: pos });
            }
        }
        let d = self.d_head;
        for (g, h) in self.heads.iter_mut().enumerate() {
            h.push(&k[g * d..(g + 1) * d], &v[g * d..(g + 1) * d], pos)?;
        }
        Ok(())
    }

    pub fn append(&mut self, k_rows: &Matrix, v_rows: &Matrix, positions: &[usize]) -> Result<()> {
        if k_rows.rows() != positions.len() || v_rows.rows() != positions.len() {
            return shape_err("keys, values and positions differ in length");
        }
        if positions.windows(2).any(|w| w[1] <= w[0]) {
            let i = positions.windows(2).position(|w| w[1] <= w[0]).unwrap_or(0);
            return Err(Error::NonMonotone {
                last: positions[i],
                next: positions[i + 1],
            });
        }
        for (i, &p) in positions.iter().enumerate() {
            self.append_row(k_rows.row(i), v_rows.row(i), p)?;
        }
        Ok(())
    }

    /// Keeps rows `keep` (ascending row indices) in every kv head and returns
    /// the evicted rows in original order.
    pub fn compact(&mut self, keep: &[usize], sinks: usize, window: usize) -> Result<Vec<EvictedRow>> {
        if !self.is_uniform() {
            return invalid("per-layer compaction of a cache with diverged heads");
        }
        check_keep(&self.heads[0].positions, keep, sinks, window)?;
        let mut parts: Vec<(Matrix, Matrix, Vec<usize>)> =
            self.heads.iter_mut().map(|h| h.retain(keep)).collect();
        let positions = std::mem::take(&mut parts[0].2);
        Ok(positions
            .into_iter()
            .enumerate()
            .map(|(i, position)| EvictedRow {
                position,
                key: parts.iter().flat_map(|p| p.0.row(i).iter().copied()).collect(),
                value: parts.iter().flat_map(|p| p.1.row(i).iter().copied()).collect(),
            })
            .collect())
    }

    /// Compacts a single kv head.
    pub fn compact_head(
        &mut self,
        head: usize,
        keep: &[usize],
        sinks: usize,
        window: usize,
    ) -> Result<Vec<EvictedHeadRow>> {
        if head >= self.heads.len() {
            return invalid(format!("kv head {head} out of range"));
        }
        check_keep(&self.heads[head].positions, keep, sinks, window)?;
        let (k, v, pos) = self.heads[head].retain(keep);
        Ok(pos
            .into_iter()
            .enumerate()
            .map(|(i, position)| EvictedHeadRow {
                head,
                position,
                key: k.row(i).to_vec(),
                value: v.row(i).to_vec(),
            })
            .collect())
    }

    /// Decode-step attention of one query row over the retained rows.
    pub fn attend(&self, q_row: &[f64], layout: HeadLayout, scale: f64) -> Result<Vec<f64>> {
        if q_row.len() != layout.q_width() || layout.n_kv_heads != self.heads.len() {
            return shape_err("query row does not match the cache layout");
        }
        let mut out = Vec::with_capacity(layout.q_width());
        for h in 0..layout.n_heads {
            let store = &self.heads[layout.kv_head(h)];
            out.extend(attend_head(layout.head(q_row, h), &store.keys, &store.values, scale)?);
        }
        Ok(out)
    }

    pub fn bytes(&self) -> usize {
        self.total_rows() * self.d_head * 2 * std::mem::size_of::<f64>()
    }
}

fn check_keep(positions: &[usize], keep: &[usize], sinks: usize, window: usize) -> Result<()> {
    let n = positions.len();
    if keep.windows(2).any(|w| w[1] <= w[0]) {
        return invalid("keep indices must be strictly ascending");
    }
    if let Some(&last) = keep.last() {
        if last >= n {
            return invalid(format!("keep index {last} out of {n} rows"));
        }
    }
    let kept = |i: usize| keep.binary_search(&i).is_ok();
    for (i, &p) in positions.iter().enumerate() {
        if p < sinks && !kept(i) {
            return Err(Error::SinkEviction(p));
        }
    }
    for i in n.saturating_sub(window)..n {
        if !kept(i) {
            return Err(Error::WindowEviction(positions[i]));
        }
    }
    Ok(())
}

/// Caches of every layer plus the protection settings they share.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    layout: HeadLayout,
    sinks: usize,
    window: usize,
    layers: Vec<LayerCache>,
}

impl KvCache {
    pub fn new(n_layers: usize, layout: HeadLayout, sinks: usize, window: usize) -> Self {
        Self {
            layout,
            sinks,
            window,
            layers: (0..n_layers)
                .map(|_| LayerCache::new(layout.n_kv_heads, layout.d_head))
                .collect(),
        }
    }

    pub fn layout(&self) -> HeadLayout {
        self.layout
    }

    pub fn sinks(&self) -> usize {
        self.sinks
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, l: usize) -> &LayerCache {
        &self.layers[l]
    }

    pub fn len(&self, l: usize) -> usize {
        self.layers[l].len()
    }

    pub fn max_len(&self) -> usize {
        self.layers.iter().map(LayerCache::len).max().unwrap_or(0)
    }

    pub fn append(&mut self, l: usize, k_rows: &Matrix, v_rows: &Matrix, positions: &[usize]) -> Result<()> {
        self.layer_mut(l)?.append(k_rows, v_rows, positions)
    }

    pub fn append_row(&mut self, l: usize, k: &[f64], v: &[f64], pos: usize) -> Result<()> {
        self.layer_mut(l)?.append_row(k, v, pos)
    }

    pub fn compact(&mut self, l: usize, keep: &[usize]) -> Result<Vec<EvictedRow>> {
        let (s, w) = (self.sinks, self.window);
        self.layer_mut(l)?.compact(keep, s, w)
    }

    pub fn compact_head(&mut self, l: usize, head: usize, keep: &[usize]) -> Result<Vec<EvictedHeadRow>> {
        let (s, w) = (self.sinks, self.window);
        self.layer_mut(l)?.compact_head(head, keep, s, w)
    }

    /// One-shot prefill compression of layer `l` by `scores` (one per row).
    pub fn prefill_compress(&mut self, l: usize, plan: &CompressionPlan, scores: &[f64]) -> Result<Vec<EvictedRow>> {
        let layer = self.layer_mut(l)?;
        if scores.len() != layer.len() {
            return shape_err(format!("{} scores for {} rows", scores.len(), layer.len()));
        }
        let positions = layer.positions().to_vec();
        let n_sink_rows = positions.iter().filter(|&&p| p < plan.sinks).count();
        let middle = plan.prefill_target(positions.len()).saturating_sub(n_sink_rows);
        let keep = select(&positions, scores, plan.sinks, plan.local_window, middle)?;
        let (s, w) = (self.sinks, self.window);
        self.layers[l].compact(&keep, s, w)
    }

    pub fn kv_bytes(&self) -> usize {
        self.layers.iter().map(LayerCache::bytes).sum()
    }

    fn layer_mut(&mut self, l: usize) -> Result<&mut LayerCache> {
        let n = self.layers.len();
        self.layers
            .get_mut(l)
            .ok_or_else(|| Error::InvalidArgument(format!("layer {l} out of {n}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::Rng;

    fn layout() -> HeadLayout {
        HeadLayout::new(2, 1, 2).unwrap()
    }

    fn rows(n: usize, seed: u64) -> Matrix {
        Matrix::random_normal(n, 2, 1.0, &mut Rng::new(seed))
    }

    #[test]
    fn append_to_empty() {
        let mut c = KvCache::new(1, layout(), 1, 1);
        c.append(0, &rows(3, 1), &rows(3, 2), &[0, 1, 2]).unwrap();
        assert_eq!(c.len(0), 3);
        assert!(c.append(0, &rows(1, 3), &rows(1, 4), &[2]).is_err());
    }

    #[test]
    fn appends_commute_with_concatenation() {
        let (k, v) = (rows(4, 1), rows(4, 2));
        let mut a = KvCache::new(1, layout(), 1, 1);
        a.append(0, &k, &v, &[0, 1, 2, 3]).unwrap();
        let mut b = KvCache::new(1, layout(), 1, 1);
        b.append(0, &k.gather_rows(&[0, 1]), &v.gather_rows(&[0, 1]), &[0, 1]).unwrap();
        b.append(0, &k.gather_rows(&[2, 3]), &v.gather_rows(&[2, 3]), &[2, 3]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn layers_are_independent() {
        let mut c = KvCache::new(2, layout(), 1, 1);
        c.append_row(0, &[1.0, 2.0], &[3.0, 4.0], 0).unwrap();
        c.append_row(1, &[5.0, 6.0], &[7.0, 8.0], 0).unwrap();
        c.append_row(0, &[1.5, 2.5], &[3.5, 4.5], 1).unwrap();
        assert_eq!(c.len(0), 2);
        assert_eq!(c.len(1), 1);
        assert_eq!(c.layer(1).key_row(0), vec![5.0, 6.0]);
    }

    #[test]
    fn keep_all_evicts_nothing() {
        let mut c = KvCache::new(1, layout(), 2, 1);
        c.append(0, &rows(5, 1), &rows(5, 2), &[0, 1, 2, 3, 4]).unwrap();
        let before = c.clone();
        assert!(c.compact(0, &[0, 1, 2, 3, 4]).unwrap().is_empty());
        assert_eq!(c, before);
    }

    #[test]
    fn compaction_returns_evicted_in_order() {
        let mut c = KvCache::new(1, layout(), 2, 1);
        c.append(0, &rows(6, 1), &rows(6, 2), &[0, 1, 2, 3, 4, 5]).unwrap();
        let ev = c.compact(0, &[0, 1, 4, 5]).unwrap();
        assert_eq!(ev.iter().map(|e| e.position).collect::<Vec<_>>(), vec![2, 3]);
        assert_eq!(c.layer(0).positions(), &[0, 1, 4, 5]);
    }

    #[test]
    fn sink_and_window_rows_are_protected() {
        let mut c = KvCache::new(1, layout(), 2, 1);
        c.append(0, &rows(6, 1), &rows(6, 2), &[0, 1, 2, 3, 4, 5]).unwrap();
        assert_eq!(c.compact(0, &[0, 2, 3, 4, 5]), Err(Error::SinkEviction(1)));
        assert_eq!(c.compact(0, &[0, 1, 2, 3, 4]), Err(Error::WindowEviction(5)));
        assert_eq!(
            Error::SinkEviction(1).to_string(),
            "sink eviction forbidden (position 1)"
        );
    }

    #[test]
    fn prefill_ratio_zero_is_identity() {
        let plan = CompressionPlan { ratio: 0.0, sinks: 1, local_window: 1, budget: 8, ..Default::default() };
        let mut c = KvCache::new(1, layout(), 1, 1);
        c.append(0, &rows(8, 1), &rows(8, 2), &(0..8).collect::<Vec<_>>()).unwrap();
        let before = c.clone();
        assert!(c.prefill_compress(0, &plan, &[1.0; 8]).unwrap().is_empty());
        assert_eq!(c, before);
    }

    #[test]
    fn prefill_half_ratio_example() {
        let plan = CompressionPlan { ratio: 0.5, sinks: 1, local_window: 1, budget: 8, ..Default::default() };
        let mut c = KvCache::new(1, layout(), 1, 1);
        c.append(0, &rows(8, 1), &rows(8, 2), &(0..8).collect::<Vec<_>>()).unwrap();
        let scores = [0.0, 9.0, 1.0, 8.0, 2.0, 7.0, 3.0, 0.0];
        c.prefill_compress(0, &plan, &scores).unwrap();
        assert_eq!(c.layer(0).positions(), &[0, 1, 3, 5, 7]);
    }

    #[test]
    fn prefill_full_ratio_keeps_forced_rows_only() {
        let plan = CompressionPlan { ratio: 1.0, sinks: 2, local_window: 2, budget: 8, ..Default::default() };
        let mut c = KvCache::new(1, layout(), 2, 2);
        c.append(0, &rows(10, 1), &rows(10, 2), &(0..10).collect::<Vec<_>>()).unwrap();
        c.prefill_compress(0, &plan, &[5.0; 10]).unwrap();
        assert_eq!(c.layer(0).positions(), &[0, 1, 8, 9]);
    }

    #[test]
    fn plan_validation() {
        assert!(CompressionPlan::default().validate().is_ok());
        assert_eq!(CompressionPlan::default().interval, 128);
        assert_eq!(CompressionPlan::default().sinks, 4);
        let bad = CompressionPlan { budget: 10, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = CompressionPlan { interval: 0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = CompressionPlan { ratio: 1.5, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn per_head_compaction_diverges_heads() {
        let lay = HeadLayout::new(2, 2, 2).unwrap();
        let mut c = KvCache::new(1, lay, 1, 1);
        let k = Matrix::random_normal(4, 4, 1.0, &mut Rng::new(1));
        c.append(0, &k, &k, &[0, 1, 2, 3]).unwrap();
        let ev = c.compact_head(0, 1, &[0, 2, 3]).unwrap();
        assert_eq!(ev.len(), 1);
        assert_eq!(ev[0].position, 1);
        assert!(!c.layer(0).is_uniform());
        assert!(c.compact(0, &[0, 3]).is_err());
        assert_eq!(c.layer(0).total_rows(), 7);
    }
}
