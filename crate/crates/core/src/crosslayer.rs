//! Combining per-layer score vectors into one shared ranking.

use crate::error::{invalid, shape_err, Error, Result};
use crate::math::{normalized_entropy, score_to_prob, ProbMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SkipDirection {
    /// Include layers whose entropy is at most the threshold.
    SkipHigh,
    /// Include layers whose entropy is at least the threshold.
    SkipLow,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Aggregation {
    None,
    LayerMean,
    EntropyGated {
        gamma: f64,
        prob: ProbMode,
        direction: SkipDirection,
    },
}

impl Aggregation {
    pub fn validate(&self) -> Result<()> {
        if let Aggregation::EntropyGated { gamma, prob, .. } = self {
            if !(0.0..=1.0).contains(gamma) {
                return invalid(format!("gamma {gamma} outside [0, 1]"));
            }
            if let ProbMode::Softmax { temperature } = prob {
                if !(*temperature > 0.0) {
                    return invalid("softmax temperature must be positive");
                }
            }
        }
        Ok(())
    }

    /// Shared scores for every layer, or `None` when layers keep their own.
    pub fn apply(&self, bundle: &[Vec<f64>]) -> Result<Option<Vec<f64>>> {
        match *self {
            Aggregation::None => Ok(None),
            Aggregation::LayerMean => running_mean(bundle).map(Some),
            Aggregation::EntropyGated { gamma, prob, direction } => {
                let gated = entropy_gated_mean(bundle, gamma, prob, direction)?;
                Ok(Some(match gated {
                    Some(s) => s,
                    None => running_mean(bundle)?,
                }))
            }
        }
    }
}

fn check_bundle(bundle: &[Vec<f64>]) -> Result<usize> {
    let n = bundle.first().ok_or(Error::EmptySupport)?.len();
    if bundle.iter().any(|s| s.len() != n) {
        return shape_err("layer score vectors differ in length");
    }
    Ok(n)
}

/// Element-wise mean over layers.
pub fn running_mean(bundle: &[Vec<f64>]) -> Result<Vec<f64>> {
    let n = check_bundle(bundle)?;
    let mut out = vec![0.0; n];
    for s in bundle {
        out.iter_mut().zip(s).for_each(|(a, b)| *a += b);
    }
    let m = bundle.len() as f64;
    out.iter_mut().for_each(|a| *a /= m);
    Ok(out)
}

/// Normalized entropy of each layer's score distribution.
pub fn layer_entropies(bundle: &[Vec<f64>], prob: ProbMode) -> Result<Vec<f64>> {
    check_bundle(bundle)?;
    bundle
        .iter()
        .map(|s| normalized_entropy(&score_to_prob(s, prob)?))
        .collect()
}

/// Mean over the layers that pass the entropy threshold. Returns `None`
/// when no layer passes, so the caller can fall back to [`running_mean`].
pub fn entropy_gated_mean(
    bundle: &[Vec<f64>],
    gamma: f64,
    prob: ProbMode,
    direction: SkipDirection,
) -> Result<Option<Vec<f64>>> {
    if !(0.0..=1.0).contains(&gamma) {
        return invalid(format!("gamma {gamma} outside [0, 1]"));
    }
    let n = check_bundle(bundle)?;
    let ent = layer_entropies(bundle, prob)?;
    let include: Vec<bool> = ent
        .iter()
        .map(|&h| match direction {
            SkipDirection::SkipHigh => h <= gamma,
            SkipDirection::SkipLow => h >= gamma,
        })
        .collect();
    let count = include.iter().filter(|&&a| a).count();
    if count == 0 {
        return Ok(None);
    }
    let mut out = vec![0.0; n];
    for (s, _) in bundle.iter().zip(&include).filter(|(_, &a)| a) {
        out.iter_mut().zip(s).for_each(|(a, b)| *a += b);
    }
    let m = count as f64;
    out.iter_mut().for_each(|a| *a /= m);
    Ok(Some(out))
}

/// Source layer whose scores layer `l` reuses: the first layer of its group.
pub fn index_reuse_plan(n_layers: usize, group_size: usize) -> Result<Vec<usize>> {
    if group_size == 0 {
        return invalid("reuse group size must be at least 1");
    }
    Ok((0..n_layers).map(|l| l / group_size * group_size).collect())
}

/// Pairwise Jaccard similarity of per-layer keep sets.
pub fn overlap_metric(keep_sets: &[Vec<usize>]) -> Vec<Vec<f64>> {
    let n = keep_sets.len();
    let mut out = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            out[i][j] = if i == j { 1.0 } else { jaccard(&keep_sets[i], &keep_sets[j]) };
        }
    }
    out
}

fn jaccard(a: &[usize], b: &[usize]) -> f64 {
    let sa: std::collections::BTreeSet<_> = a.iter().collect();
    let sb: std::collections::BTreeSet<_> = b.iter().collect();
    let union = sa.union(&sb).count();
    if union == 0 {
        return 1.0;
    }
    sa.intersection(&sb).count() as f64 / union as f64
}

/// Mean Jaccard overlap of adjacent layers.
pub fn adjacent_overlap(keep_sets: &[Vec<usize>]) -> f64 {
    if keep_sets.len() < 2 {
        return 1.0;
    }
    let s: f64 = keep_sets.windows(2).map(|w| jaccard(&w[0], &w[1])).sum();
    s / (keep_sets.len() - 1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::Rng;
    use proptest::prelude::{prop, prop_assert, proptest};

    const SOFT: ProbMode = ProbMode::Softmax { temperature: 1.0 };

    #[test]
    fn running_mean_examples() {
        let s = vec![1.0, -2.0, 3.5];
        assert_eq!(running_mean(&[s.clone()]).unwrap(), s);
        let neg: Vec<f64> = s.iter().map(|v| -v).collect();
        assert_eq!(running_mean(&[s, neg]).unwrap(), vec![0.0; 3]);
        assert!(running_mean(&[]).is_err());
    }

    #[test]
    fn running_mean_matches_recurrence() {
        let mut rng = Rng::new(3);
        let bundle: Vec<Vec<f64>> = (0..7).map(|_| rng.normal_vec(10)).collect();
        let mut rec = vec![0.0; 10];
        for (m, s) in bundle.iter().enumerate() {
            let k = (m + 1) as f64;
            rec.iter_mut().zip(s).for_each(|(a, b)| *a += (b - *a) / k);
        }
        for (a, b) in running_mean(&bundle).unwrap().iter().zip(&rec) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gamma_one_skip_high_is_running_mean() {
        let mut rng = Rng::new(4);
        let bundle: Vec<Vec<f64>> = (0..4).map(|_| rng.normal_vec(16)).collect();
        let g = entropy_gated_mean(&bundle, 1.0, SOFT, SkipDirection::SkipHigh).unwrap().unwrap();
        assert_eq!(g, running_mean(&bundle).unwrap());
    }

    #[test]
    fn gamma_zero_empties_inclusion() {
        let bundle = vec![vec![0.0, 1.0, 2.0], vec![1.0, 1.0, 0.0]];
        assert_eq!(entropy_gated_mean(&bundle, 0.0, SOFT, SkipDirection::SkipHigh).unwrap(), None);
        let agg = Aggregation::EntropyGated { gamma: 0.0, prob: SOFT, direction: SkipDirection::SkipHigh };
        assert_eq!(agg.apply(&bundle).unwrap(), Some(running_mean(&bundle).unwrap()));
        assert!(entropy_gated_mean(&bundle, 1.5, SOFT, SkipDirection::SkipHigh).is_err());
    }

    #[test]
    fn gated_mean_of_selected_layers() {
        let peaked = |i: usize| {
            let mut v = vec![0.0; 8];
            v[i] = 30.0;
            v
        };
        let bundle = vec![peaked(1), vec![0.0; 8], peaked(5), vec![0.01; 8]];
        let ent = layer_entropies(&bundle, SOFT).unwrap();
        assert!(ent[0] < 0.5 && ent[2] < 0.5 && ent[1] > 0.99 && ent[3] > 0.99);
        let got = entropy_gated_mean(&bundle, 0.5, SOFT, SkipDirection::SkipHigh).unwrap().unwrap();
        for t in 0..8 {
            let want = (bundle[0][t] + bundle[2][t]) / 2.0;
            assert!((got[t] - want).abs() < 1e-12);
        }
        let low = entropy_gated_mean(&bundle, 0.5, SOFT, SkipDirection::SkipLow).unwrap().unwrap();
        for t in 0..8 {
            assert!((low[t] - 0.005).abs() < 1e-12);
        }
    }

    #[test]
    fn entropy_extremes() {
        let u = score_to_prob(&[0.0; 8], SOFT).unwrap();
        assert!((normalized_entropy(&u).unwrap() - 1.0).abs() < 1e-9);
        let mut one_hot = vec![0.0; 8];
        one_hot[3] = 1.0;
        assert!(normalized_entropy(&one_hot).unwrap().abs() < 1e-9);
    }

    #[test]
    fn reuse_plan() {
        assert_eq!(index_reuse_plan(5, 1).unwrap(), vec![0, 1, 2, 3, 4]);
        assert_eq!(index_reuse_plan(8, 4).unwrap(), vec![0, 0, 0, 0, 4, 4, 4, 4]);
        assert!(index_reuse_plan(4, 0).is_err());
        for n in 0..20 {
            for g in 1..6 {
                let p = index_reuse_plan(n, g).unwrap();
                assert!(p.iter().enumerate().all(|(l, &s)| s <= l));
            }
        }
    }

    #[test]
    fn overlap_examples() {
        let same = overlap_metric(&[vec![1, 2, 3], vec![1, 2, 3]]);
        assert_eq!(same, vec![vec![1.0, 1.0], vec![1.0, 1.0]]);
        let disjoint = overlap_metric(&[vec![1, 2], vec![3, 4], vec![5, 6]]);
        for (i, row) in disjoint.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                assert_eq!(*v, if i == j { 1.0 } else { 0.0 });
            }
        }
        assert_eq!(adjacent_overlap(&[vec![1, 2], vec![2, 3]]), 1.0 / 3.0);
    }

    proptest! {
        #[test]
        fn aggregation_is_permutation_equivariant(
            a in prop::collection::vec(-3.0f64..3.0, 6),
            b in prop::collection::vec(-3.0f64..3.0, 6),
            seed in 0u64..1000,
        ) {
            let mut perm: Vec<usize> = (0..6).collect();
            Rng::new(seed).shuffle(&mut perm);
            let p = |v: &Vec<f64>| perm.iter().map(|&i| v[i]).collect::<Vec<f64>>();
            for agg in [
                Aggregation::LayerMean,
                Aggregation::EntropyGated { gamma: 0.9, prob: SOFT, direction: SkipDirection::SkipHigh },
                Aggregation::EntropyGated { gamma: 0.5, prob: ProbMode::NegOnly, direction: SkipDirection::SkipLow },
            ] {
                let whole = agg.apply(&[a.clone(), b.clone()]).unwrap().unwrap();
                let permuted = agg.apply(&[p(&a), p(&b)]).unwrap().unwrap();
                for (x, y) in p(&whole).iter().zip(&permuted) {
                    prop_assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }
}
