use crate::error::{invalid, shape_err, Error, Result};

/// RMSNorm epsilon.
pub const EPS_NORM: f64 = 1e-6;
/// Epsilon inside the log of [`normalized_entropy`].
pub const EPS_ENTROPY: f64 = 1e-12;
/// Default guard for divisions.
pub const DELTA: f64 = 1e-12;

/// Numerically stable softmax. `-inf` entries are masked and map to 0.
pub fn softmax_stable(logits: &[f64]) -> Result<Vec<f64>> {
    let max = finite_max(logits)?;
    let mut out: Vec<f64> = logits
        .iter()
        .map(|&x| if x == f64::NEG_INFINITY { 0.0 } else { (x - max).exp() })
        .collect();
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= z);
    Ok(out)
}

/// Log-softmax with the same masking rule as [`softmax_stable`].
pub fn log_softmax(logits: &[f64]) -> Result<Vec<f64>> {
    let max = finite_max(logits)?;
    let z: f64 = logits
        .iter()
        .filter(|x| **x != f64::NEG_INFINITY)
        .map(|&x| (x - max).exp())
        .sum();
    let lse = max + z.ln();
    Ok(logits
        .iter()
        .map(|&x| if x == f64::NEG_INFINITY { x } else { x - lse })
        .collect())
}

fn finite_max(logits: &[f64]) -> Result<f64> {
    let max = logits
        .iter()
        .copied()
        .filter(|x| *x != f64::NEG_INFINITY)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        Err(Error::EmptySupport)
    } else {
        Ok(max)
    }
}

/// `x / sqrt(mean(x^2) + eps)`; no learnable scale.
pub fn rmsnorm(x: &[f64]) -> Vec<f64> {
    let r = rms(x);
    x.iter().map(|v| v / r).collect()
}

#[inline]
fn rms(x: &[f64]) -> f64 {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    (ms + EPS_NORM).sqrt()
}

/// Vector-Jacobian product of [`rmsnorm`] at `x` for upstream gradient `dy`.
pub fn rmsnorm_backward(x: &[f64], dy: &[f64]) -> Vec<f64> {
    let r = rms(x);
    let n = x.len() as f64;
    let proj: f64 = dy.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() / (n * r * r * r);
    dy.iter().zip(x).map(|(d, xi)| d / r - xi * proj).collect()
}

/// Indices of the `k` largest scores in ascending index order.
/// Ties go to the lower index.
pub fn topk_indices(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > scores.len() {
        return invalid(format!("top-{k} of {} scores", scores.len()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut out = order[..k].to_vec();
    out.sort_unstable();
    Ok(out)
}

/// `KL(softmax(target) || softmax(student))` via log-softmax.
///
/// Both inputs may carry `-inf` masks, which must sit at the same positions.
pub fn kl_divergence(target_logits: &[f64], student_logits: &[f64]) -> Result<f64> {
    if target_logits.len() != student_logits.len() {
        return shape_err(format!(
            "kl over {} vs {} logits",
            target_logits.len(),
            student_logits.len()
        ));
    }
    for (i, (t, s)) in target_logits.iter().zip(student_logits).enumerate() {
        if (*t == f64::NEG_INFINITY) != (*s == f64::NEG_INFINITY) {
            return Err(Error::MaskMismatch(i));
        }
    }
    let lp = log_softmax(target_logits)?;
    let lq = log_softmax(student_logits)?;
    let mut kl = 0.0;
    for (a, b) in lp.iter().zip(&lq) {
        if *a != f64::NEG_INFINITY {
            kl += a.exp() * (a - b);
        }
    }
    Ok(kl)
}

/// `-(1 / log T) * sum p_t log(p_t + eps)`.
pub fn normalized_entropy(p: &[f64]) -> Result<f64> {
    if p.len() < 2 {
        return invalid("normalized entropy needs at least two outcomes");
    }
    let h: f64 = p.iter().map(|&pt| pt * (pt + EPS_ENTROPY).ln()).sum();
    Ok(-h / (p.len() as f64).ln())
}

/// How raw scores are turned into a probability vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ProbMode {
    Softmax { temperature: f64 },
    /// L1 normalization after shifting by the minimum, only when it is negative.
    NegOnly,
}

pub fn score_to_prob(scores: &[f64], mode: ProbMode) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::EmptySupport);
    }
    match mode {
        ProbMode::Softmax { temperature } => {
            if !(temperature > 0.0) {
                return invalid(format!("softmax temperature {temperature} must be positive"));
            }
            let scaled: Vec<f64> = scores.iter().map(|s| s / temperature).collect();
            softmax_stable(&scaled)
        }
        ProbMode::NegOnly => {
            let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
            let shifted: Vec<f64> = if min < 0.0 {
                scores.iter().map(|s| s - min).collect()
            } else {
                scores.to_vec()
            };
            let total: f64 = shifted.iter().sum();
            if total == 0.0 {
                let u = 1.0 / scores.len() as f64;
                return Ok(vec![u; scores.len()]);
            }
            Ok(shifted.iter().map(|s| s / (total + DELTA)).collect())
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const NEG: f64 = f64::NEG_INFINITY;

    #[test]
    fn softmax_examples() {
        let p = softmax_stable(&[1.0, 1.0, 1.0]).unwrap();
        for v in p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(softmax_stable(&[0.0, NEG]).unwrap(), vec![1.0, 0.0]);
        // 1 / (1 + e) and e / (1 + e), evaluated at 30 digits.
        let p = softmax_stable(&[1000.0, 1001.0]).unwrap();
        assert!((p[0] - 0.268_941_421_369_995_120_7).abs() < 1e-15);
        assert!((p[1] - 0.731_058_578_630_004_879_3).abs() < 1e-15);
        assert_eq!(softmax_stable(&[NEG, NEG]), Err(Error::EmptySupport));
    }

    #[test]
    fn rmsnorm_examples() {
        assert!(rmsnorm(&[2.0; 4]).iter().all(|v| (v - 1.0).abs() < 1e-6));
        assert_eq!(rmsnorm(&[0.0, 0.0]), vec![0.0, 0.0]);
        let y = rmsnorm(&[3.0, 4.0]);
        let r = (12.5f64 + 1e-6).sqrt();
        assert!((y[0] - 3.0 / r).abs() < 1e-15);
        assert!((y[1] - 4.0 / r).abs() < 1e-15);
        assert!((y[0] - 0.8485).abs() < 1e-4 && (y[1] - 1.1314).abs() < 1e-4);
    }

    #[test]
    fn rmsnorm_backward_matches_finite_difference() {
        let x = [0.3, -1.2, 2.0, 0.7];
        let dy = [0.5, -0.25, 1.0, 2.0];
        let g = rmsnorm_backward(&x, &dy);
        let h = 1e-6;
        for i in 0..x.len() {
            let mut xp = x;
            let mut xm = x;
            xp[i] += h;
            xm[i] -= h;
            let f = |v: &[f64]| rmsnorm(v).iter().zip(&dy).map(|(a, b)| a * b).sum::<f64>();
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-8, "{i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn topk_examples() {
        assert_eq!(topk_indices(&[3.0, 1.0, 2.0], 2).unwrap(), vec![0, 2]);
        assert_eq!(topk_indices(&[1.0, 1.0, 1.0], 2).unwrap(), vec![0, 1]);
        assert_eq!(topk_indices(&[5.0], 1).unwrap(), vec![0]);
        assert!(topk_indices(&[5.0], 2).is_err());
    }

    #[test]
    fn kl_examples() {
        let x = [0.3, -2.0, 1.5];
        assert_eq!(kl_divergence(&x, &x).unwrap(), 0.0);
        // 0.5 ln 2 + 0.5 ln(2/3)
        let expected = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        let kl = kl_divergence(&[0.0, 0.0], &[0.0, 3f64.ln()]).unwrap();
        assert!((kl - expected).abs() < 1e-15);
        assert!((kl - 0.14384).abs() < 1e-5);
        let masked = kl_divergence(&[0.0, 0.0, NEG], &[0.0, 3f64.ln(), NEG]).unwrap();
        assert!((masked - kl).abs() < 1e-15);
        assert_eq!(
            kl_divergence(&[0.0, NEG], &[0.0, 1.0]),
            Err(Error::MaskMismatch(1))
        );
    }

    #[test]
    fn entropy_examples() {
        assert!((normalized_entropy(&[0.125; 8]).unwrap() - 1.0).abs() < 1e-9);
        let mut one_hot = [0.0; 8];
        one_hot[3] = 1.0;
        assert!(normalized_entropy(&one_hot).unwrap().abs() < 1e-9);
        let h = normalized_entropy(&[0.75, 0.25]).unwrap();
        let expected = -(0.75 * 0.75f64.ln() + 0.25 * 0.25f64.ln()) / 2f64.ln();
        assert!((h - expected).abs() < 1e-10);
        assert!((h - 0.8113).abs() < 1e-4);
        assert!(normalized_entropy(&[1.0]).is_err());
    }

    #[test]
    fn score_to_prob_examples() {
        let p = score_to_prob(&[1.0, 2.0, 3.0], ProbMode::NegOnly).unwrap();
        for (a, b) in p.iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        let p = score_to_prob(&[-1.0, 0.0, 1.0], ProbMode::NegOnly).unwrap();
        for (a, b) in p.iter().zip([0.0, 1.0 / 3.0, 2.0 / 3.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        let p = score_to_prob(&[0.0, 0.0], ProbMode::Softmax { temperature: 1.0 }).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
        assert_eq!(score_to_prob(&[0.0; 3], ProbMode::NegOnly).unwrap(), vec![1.0 / 3.0; 3]);
        assert!(score_to_prob(&[0.0], ProbMode::Softmax { temperature: 0.0 }).is_err());
    }

    fn logits(n: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-20.0..20.0f64, n)
    }

    proptest! {
        #[test]
        fn softmax_shift_invariant(x in logits(7), c in -500.0..500.0f64) {
            let a = softmax_stable(&x).unwrap();
            let shifted: Vec<f64> = x.iter().map(|v| v + c).collect();
            let b = softmax_stable(&shifted).unwrap();
            let total: f64 = a.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            for (u, v) in a.iter().zip(&b) {
                prop_assert!((u - v).abs() < 1e-12);
            }
        }

        #[test]
        fn topk_permutation_consistent(x in proptest::collection::hash_set(-1000i32..1000, 2..30), seed in any::<u64>(), kf in 0.0..1.0f64) {
            let scores: Vec<f64> = x.into_iter().map(f64::from).collect();
            let k = ((scores.len() as f64) * kf) as usize;
            let mut perm: Vec<usize> = (0..scores.len()).collect();
            crate::math::Rng::new(seed).shuffle(&mut perm);
            let permuted: Vec<f64> = perm.iter().map(|&i| scores[i]).collect();
            let direct = topk_indices(&scores, k).unwrap();
            let mut via: Vec<usize> = topk_indices(&permuted, k).unwrap().into_iter().map(|j| perm[j]).collect();
            via.sort_unstable();
            prop_assert_eq!(direct, via);
        }

        #[test]
        fn kl_nonnegative(p in logits(9), q in logits(9)) {
            prop_assert!(kl_divergence(&p, &q).unwrap() >= 0.0);
            prop_assert!(kl_divergence(&p, &p).unwrap().abs() <= 1e-12);
        }

        #[test]
        fn entropy_maximized_by_uniform(w in proptest::collection::vec(0.0..1.0f64, 6)) {
            let total: f64 = w.iter().sum::<f64>() + 1e-9;
            let p: Vec<f64> = w.iter().map(|v| (v + 1e-9 / 6.0) / total).collect();
            let h = normalized_entropy(&p).unwrap();
            let hu = normalized_entropy(&[1.0 / 6.0; 6]).unwrap();
            prop_assert!(h <= hu + 1e-12);
            prop_assert!((-1e-9..=1.0 + 1e-9).contains(&h));
        }

        #[test]
        fn negonly_nonnegative_is_l1(x in proptest::collection::vec(0.0..10.0f64, 1..12)) {
            let total: f64 = x.iter().sum();
            prop_assume!(total > 0.0);
            let p = score_to_prob(&x, ProbMode::NegOnly).unwrap();
            for (pi, xi) in p.iter().zip(&x) {
                prop_assert_eq!(*pi, xi / (total + DELTA));
                prop_assert!((pi - xi / total).abs() <= 1e-12 * (1.0 + 1.0 / total));
            }
        }
    }
}
