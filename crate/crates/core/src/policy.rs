//! Score functions and top-K selection for cache eviction.

use crate::attention::{head_probs, HeadLayout};
use crate::cache::LayerCache;
use crate::error::{invalid, shape_err, Result};
use crate::math::{norm2, topk_indices, Matrix, Rng};

/// How SnapKV combines the query heads that share one kv head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HeadPool {
    #[default]
    Mean,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyId {
    SnapKv { window: usize, pool: HeadPool },
    Knorm,
    Tova,
    Indexer,
    Random { seed: u64 },
}

impl PolicyId {
    pub fn name(&self) -> &'static str {
        match self {
            PolicyId::SnapKv { .. } => "snapkv",
            PolicyId::Knorm => "knorm",
            PolicyId::Tova => "tova",
            PolicyId::Indexer => "indexer",
            PolicyId::Random { .. } => "random",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            PolicyId::SnapKv { window: 0, .. } => invalid("snapkv window must be positive"),
            _ => Ok(()),
        }
    }

    pub fn is_heuristic(&self) -> bool {
        !matches!(self, PolicyId::Indexer)
    }
}

/// One score vector per kv head; each has as many entries as that head retains.
pub type HeadScores = Vec<Vec<f64>>;

/// Mean attention mass that the query rows `q_rows` (post-RoPE, at positions
/// `q_pos`) put on every cached row. Cached rows later than a query are
/// masked for that query.
pub fn score_snapkv(
    q_rows: &Matrix,
    q_pos: &[usize],
    cache: &LayerCache,
    layout: HeadLayout,
    scale: f64,
    pool: HeadPool,
) -> Result<HeadScores> {
    if q_rows.rows() == 0 {
        return invalid("snapkv needs at least one query");
    }
    if q_rows.rows() != q_pos.len() || q_rows.cols() != layout.q_width() {
        return shape_err("query rows do not match positions or layout");
    }
    let mut out = Vec::with_capacity(layout.n_kv_heads);
    for g in 0..layout.n_kv_heads {
        let store = cache.head(g);
        let n = store.positions.len();
        let mut acc = vec![0.0; n];
        for (i, &p) in q_pos.iter().enumerate() {
            let visible = store.positions.partition_point(|&kp| kp <= p);
            if visible == 0 {
                return invalid(format!("query at position {p} sees no cached row"));
            }
            let keys = store.keys.gather_rows(&(0..visible).collect::<Vec<_>>());
            let mut pooled = vec![0.0; visible];
            let heads: Vec<usize> = (0..layout.n_heads).filter(|&h| layout.kv_head(h) == g).collect();
            for &h in &heads {
                let p = head_probs(layout.head(q_rows.row(i), h), &keys, scale)?;
                match pool {
                    HeadPool::Mean => pooled.iter_mut().zip(&p).for_each(|(a, b)| *a += b / heads.len() as f64),
                    HeadPool::Max => pooled.iter_mut().zip(&p).for_each(|(a, b)| *a = a.max(*b)),
                }
            }
            acc.iter_mut().zip(&pooled).for_each(|(a, b)| *a += b);
        }
        let w = q_pos.len() as f64;
        acc.iter_mut().for_each(|a| *a /= w);
        out.push(acc);
    }
    Ok(out)
}

/// Attention row of the newest query alone, mean-pooled over query heads.
pub fn score_tova(q_last: &[f64], pos: usize, cache: &LayerCache, layout: HeadLayout, scale: f64) -> Result<HeadScores> {
    let q = Matrix::from_vec(1, q_last.len(), q_last.to_vec())?;
    score_snapkv(&q, &[pos], cache, layout, scale, HeadPool::Mean)
}

/// L2 norm of every cached key row.
pub fn score_knorm(cache: &LayerCache) -> HeadScores {
    (0..cache.n_kv_heads())
        .map(|g| {
            let k = &cache.head(g).keys;
            (0..k.rows()).map(|i| norm2(k.row(i))).collect()
        })
        .collect()
}

/// Uniform random scores, one stream per kv head.
pub fn score_random(cache: &LayerCache, rng: &Rng) -> HeadScores {
    (0..cache.n_kv_heads())
        .map(|g| {
            let mut r = rng.split(g as u64);
            (0..cache.head(g).positions.len()).map(|_| r.uniform()).collect()
        })
        .collect()
}

/// Per-layer score: sum over kv heads.
pub fn layer_scores(scores: &HeadScores) -> Result<Vec<f64>> {
    let n = scores.first().map_or(0, Vec::len);
    if scores.iter().any(|s| s.len() != n) {
        return shape_err("kv heads retain different row counts");
    }
    let mut out = vec![0.0; n];
    for s in scores {
        out.iter_mut().zip(s).for_each(|(a, b)| *a += b);
    }
    Ok(out)
}

/// Keep set: rows at positions below `sinks`, the last `window` rows, and
/// the `n_middle` best-scoring remaining rows. Ascending row indices.
pub fn select(positions: &[usize], scores: &[f64], sinks: usize, window: usize, n_middle: usize) -> Result<Vec<usize>> {
    if positions.len() != scores.len() {
        return shape_err(format!("{} scores for {} rows", scores.len(), positions.len()));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return invalid(format!("non-finite score at row {i}"));
    }
    let n = positions.len();
    let win_start = n.saturating_sub(window);
    let forced = |i: usize| positions[i] < sinks || i >= win_start;
    let middle: Vec<usize> = (0..n).filter(|&i| !forced(i)).collect();
    let mid_scores: Vec<f64> = middle.iter().map(|&i| scores[i]).collect();
    let picked = topk_indices(&mid_scores, n_middle.min(middle.len()))?;
    let mut keep: Vec<usize> = (0..n).filter(|&i| forced(i)).collect();
    keep.extend(picked.into_iter().map(|j| middle[j]));
    keep.sort_unstable();
    Ok(keep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::rope_apply;
    use crate::math::{dot, softmax_stable};
    use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest};

    fn random_cache(n: usize, layout: HeadLayout, seed: u64) -> (LayerCache, Matrix) {
        let mut rng = Rng::new(seed);
        let k = Matrix::random_normal(n, layout.kv_width(), 1.0, &mut rng);
        let v = Matrix::random_normal(n, layout.kv_width(), 1.0, &mut rng);
        let mut c = LayerCache::new(layout.n_kv_heads, layout.d_head);
        c.append(&k, &v, &(0..n).collect::<Vec<_>>()).unwrap();
        (c, k)
    }

    /// Dense causal attention probabilities for query head `h`: row `i` is the
    /// distribution of query `i` over keys `0..=i`, zero-padded.
    fn dense_probs(q: &Matrix, k: &Matrix, layout: HeadLayout, h: usize, scale: f64) -> Vec<Vec<f64>> {
        let n = q.rows();
        let g = layout.kv_head(h);
        (0..n)
            .map(|i| {
                let logits: Vec<f64> = (0..n)
                    .map(|j| {
                        if j > i {
                            f64::NEG_INFINITY
                        } else {
                            dot(layout.head(q.row(i), h), layout.head(k.row(j), g)) * scale
                        }
                    })
                    .collect();
                softmax_stable(&logits).unwrap()
            })
            .collect()
    }

    #[test]
    fn snapkv_matches_dense_oracle() {
        let layout = HeadLayout::new(4, 2, 4).unwrap();
        let (cache, k) = random_cache(12, layout, 3);
        let q = Matrix::random_normal(12, layout.q_width(), 1.0, &mut Rng::new(4));
        let w = 4;
        let rows: Vec<usize> = (8..12).collect();
        let s = score_snapkv(&q.gather_rows(&rows), &rows, &cache, layout, 0.5, HeadPool::Mean).unwrap();
        for g in 0..2 {
            let heads: Vec<usize> = (0..4).filter(|&h| layout.kv_head(h) == g).collect();
            let mut want = vec![0.0; 12];
            for &h in &heads {
                let p = dense_probs(&q, &k, layout, h, 0.5);
                for &i in &rows {
                    for t in 0..12 {
                        want[t] += p[i][t] / (w * heads.len()) as f64;
                    }
                }
            }
            for t in 0..12 {
                assert!((s[g][t] - want[t]).abs() < 1e-10);
            }
            assert!((s[g].iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn snapkv_over_all_queries_is_column_mean() {
        let layout = HeadLayout::new(1, 1, 4).unwrap();
        let (cache, k) = random_cache(9, layout, 5);
        let q = Matrix::random_normal(9, 4, 1.0, &mut Rng::new(6));
        let all: Vec<usize> = (0..9).collect();
        let s = score_snapkv(&q, &all, &cache, layout, 0.5, HeadPool::Mean).unwrap();
        let p = dense_probs(&q, &k, layout, 0, 0.5);
        for t in 0..9 {
            let col = p.iter().map(|r| r[t]).sum::<f64>() / 9.0;
            assert!((s[0][t] - col).abs() < 1e-10);
        }
    }

    #[test]
    fn tova_equals_snapkv_window_one() {
        let layout = HeadLayout::new(4, 2, 4).unwrap();
        let (cache, _) = random_cache(10, layout, 7);
        let q = Rng::new(8).normal_vec(layout.q_width());
        let qm = Matrix::from_vec(1, q.len(), q.clone()).unwrap();
        let a = score_tova(&q, 9, &cache, layout, 0.5).unwrap();
        let b = score_snapkv(&qm, &[9], &cache, layout, 0.5, HeadPool::Mean).unwrap();
        assert_eq!(a, b);
        let (single, _) = random_cache(1, layout, 9);
        assert_eq!(score_tova(&q, 0, &single, layout, 0.5).unwrap(), vec![vec![1.0], vec![1.0]]);
    }

    #[test]
    fn tova_matches_dense_last_row() {
        let layout = HeadLayout::new(2, 1, 4).unwrap();
        let mut rng = Rng::new(10);
        let mut q = Matrix::random_normal(6, 8, 1.0, &mut rng);
        let mut k = Matrix::random_normal(6, 4, 1.0, &mut rng);
        for i in 0..6 {
            rope_apply(q.row_mut(i), 4, i as f64, 10_000.0).unwrap();
            rope_apply(k.row_mut(i), 4, i as f64, 10_000.0).unwrap();
        }
        let mut c = LayerCache::new(1, 4);
        c.append(&k, &k, &(0..6).collect::<Vec<_>>()).unwrap();
        let s = score_tova(q.row(5), 5, &c, layout, 0.5).unwrap();
        let p0 = dense_probs(&q, &k, layout, 0, 0.5);
        let p1 = dense_probs(&q, &k, layout, 1, 0.5);
        for t in 0..6 {
            assert!((s[0][t] - 0.5 * (p0[5][t] + p1[5][t])).abs() < 1e-10);
        }
    }

    #[test]
    fn snapkv_rejects_empty_window() {
        let layout = HeadLayout::new(1, 1, 2).unwrap();
        let (cache, _) = random_cache(3, layout, 1);
        assert!(score_snapkv(&Matrix::zeros(0, 2), &[], &cache, layout, 1.0, HeadPool::Mean).is_err());
        assert!(PolicyId::SnapKv { window: 0, pool: HeadPool::Mean }.validate().is_err());
    }

    #[test]
    fn knorm_examples() {
        let mut c = LayerCache::new(1, 2);
        c.append_row(&[1.0, 0.0], &[0.0, 0.0], 0).unwrap();
        c.append_row(&[2.0, 0.0], &[0.0, 0.0], 1).unwrap();
        c.append_row(&[0.0, 0.0], &[0.0, 0.0], 2).unwrap();
        assert_eq!(score_knorm(&c), vec![vec![1.0, 2.0, 0.0]]);
    }

    #[test]
    fn knorm_selection_is_scale_invariant() {
        let layout = HeadLayout::new(2, 2, 4).unwrap();
        let (c, k) = random_cache(20, layout, 12);
        let mut scaled_k = k.clone();
        scaled_k.scale(3.5);
        let mut c2 = LayerCache::new(2, 4);
        c2.append(&scaled_k, &scaled_k, &(0..20).collect::<Vec<_>>()).unwrap();
        let pos: Vec<usize> = (0..20).collect();
        let a = select(&pos, &layer_scores(&score_knorm(&c)).unwrap(), 2, 2, 6).unwrap();
        let b = select(&pos, &layer_scores(&score_knorm(&c2)).unwrap(), 2, 2, 6).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn random_scores_are_reproducible() {
        let layout = HeadLayout::new(2, 2, 2).unwrap();
        let (c, _) = random_cache(8, layout, 1);
        assert_eq!(score_random(&c, &Rng::new(5)), score_random(&c, &Rng::new(5)));
        assert_ne!(score_random(&c, &Rng::new(5)), score_random(&c, &Rng::new(6)));
    }

    #[test]
    fn select_equal_scores_prefers_low_indices() {
        let pos: Vec<usize> = (0..10).collect();
        assert_eq!(select(&pos, &[1.0; 10], 2, 2, 3).unwrap(), vec![0, 1, 2, 3, 4, 8, 9]);
        assert_eq!(select(&pos, &[1.0; 10], 2, 2, 10).unwrap(), pos);
    }

    fn argsort_reference(positions: &[usize], scores: &[f64], sinks: usize, window: usize, m: usize) -> Vec<usize> {
        let n = scores.len();
        let mut middle: Vec<usize> = (0..n).filter(|&i| positions[i] >= sinks && i + window < n).collect();
        middle.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
        middle.truncate(m);
        let mut keep: Vec<usize> = (0..n).filter(|&i| positions[i] < sinks || i + window >= n).collect();
        keep.extend(middle);
        keep.sort_unstable();
        keep
    }

    #[test]
    fn select_matches_argsort_reference() {
        let mut rng = Rng::new(77);
        for _ in 0..200 {
            let n = 1 + rng.below(40);
            let scores: Vec<f64> = (0..n).map(|_| (rng.below(7) as f64) - 3.0 + 0.25 * rng.normal()).collect();
            let pos: Vec<usize> = (0..n).collect();
            let (s, w, m) = (rng.below(5), rng.below(5), rng.below(n + 1));
            assert_eq!(select(&pos, &scores, s, w, m).unwrap(), argsort_reference(&pos, &scores, s, w, m));
        }
    }

    proptest! {
        #[test]
        fn selection_depends_only_on_scores(scores in prop::collection::vec(-5.0f64..5.0, 1..30), m in 0usize..30) {
            let pos: Vec<usize> = (0..scores.len()).collect();
            let a = select(&pos, &scores, 1, 1, m).unwrap();
            let b = select(&pos, &scores.clone(), 1, 1, m).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert!(a.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(a.contains(&0));
            prop_assert!(a.contains(&(scores.len() - 1)));
        }
    }
}
