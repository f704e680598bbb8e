//! Rotary embeddings and causal grouped-query attention.

use crate::error::{invalid, shape_err, Result};
use crate::math::{axpy, dot, Matrix};

/// Head geometry of a grouped-query attention layer.
///
/// Rows of query matrices are `n_heads * d_head` wide and rows of key/value
/// matrices `n_kv_heads * d_head` wide, head-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadLayout {
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub d_head: usize,
}

impl HeadLayout {
    pub fn new(n_heads: usize, n_kv_heads: usize, d_head: usize) -> Result<Self> {
        if n_heads == 0 || n_kv_heads == 0 || d_head == 0 {
            return invalid("head counts and d_head must be positive");
        }
        if n_heads % n_kv_heads != 0 {
            return invalid(format!("{n_heads} query heads not divisible by {n_kv_heads} kv heads"));
        }
        Ok(Self {
            n_heads,
            n_kv_heads,
            d_head,
        })
    }

    /// KV head read by query head `h`.
    #[inline]
    pub fn kv_head(&self, h: usize) -> usize {
        h * self.n_kv_heads / self.n_heads
    }

    pub fn group_size(&self) -> usize {
        self.n_heads / self.n_kv_heads
    }

    pub fn q_width(&self) -> usize {
        self.n_heads * self.d_head
    }

    pub fn kv_width(&self) -> usize {
        self.n_kv_heads * self.d_head
    }

    #[inline]
    pub fn head<'a>(&self, row: &'a [f64], h: usize) -> &'a [f64] {
        &row[h * self.d_head..(h + 1) * self.d_head]
    }
}

/// Rotates one head vector in place: pairs `(2i, 2i+1)` turn by
/// `pos * base^(-2i / d)`. Negative positions undo the rotation.
pub fn rope_rotate(x: &mut [f64], pos: f64, base: f64) {
    let d = x.len();
    for i in 0..d / 2 {
        let theta = pos * base.powf(-2.0 * i as f64 / d as f64);
        let (s, c) = theta.sin_cos();
        let (a, b) = (x[2 * i], x[2 * i + 1]);
        x[2 * i] = a * c - b * s;
        x[2 * i + 1] = a * s + b * c;
    }
}

/// Applies [`rope_rotate`] to every `d_head` chunk of `row`.
pub fn rope_apply(row: &mut [f64], d_head: usize, pos: f64, base: f64) -> Result<()> {
    if d_head % 2 != 0 {
        return invalid(format!("rotary embedding needs an even head dim, got {d_head}"));
    }
    if row.len() % d_head != 0 {
        return shape_err(format!("row of {} is not a multiple of {d_head}", row.len()));
    }
    for chunk in row.chunks_mut(d_head) {
        rope_rotate(chunk, pos, base);
    }
    Ok(())
}

/// Causal attention over a full sequence: row `i` of `q` attends rows
/// `0..=i` of `k`/`v`. Returns the concatenated per-head outputs (`L x H*d_head`).
pub fn attention_full(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    layout: HeadLayout,
    scale: f64,
) -> Result<Matrix> {
    check_shapes(q, k, v, layout)?;
    if q.rows() != k.rows() {
        return shape_err(format!("{} queries vs {} keys", q.rows(), k.rows()));
    }
    let n = q.rows();
    let d = layout.d_head;
    let mut out = Matrix::zeros(n, layout.q_width());
    let mut logits = vec![0.0; n];
    for h in 0..layout.n_heads {
        let g = layout.kv_head(h);
        for i in 0..n {
            let qi = layout.head(q.row(i), h);
            let mut max = f64::NEG_INFINITY;
            for (j, l) in logits.iter_mut().enumerate().take(i + 1) {
                *l = dot(qi, layout.head(k.row(j), g)) * scale;
                max = max.max(*l);
            }
            let mut z = 0.0;
            for l in logits.iter_mut().take(i + 1) {
                *l = (*l - max).exp();
                z += *l;
            }
            let o = &mut out.row_mut(i)[h * d..(h + 1) * d];
            for (j, &w) in logits.iter().enumerate().take(i + 1) {
                axpy(o, w / z, layout.head(v.row(j), g));
            }
        }
    }
    Ok(out)
}

/// Decode-step attention of one query head against a cache of `d_head`-wide
/// key/value rows: the weighted sum of cached values, accumulated with an
/// online softmax.
pub fn attend_head(qh: &[f64], keys: &Matrix, values: &Matrix, scale: f64) -> Result<Vec<f64>> {
    if keys.rows() != values.rows() || keys.cols() != qh.len() || values.cols() != qh.len() {
        return shape_err("cache keys/values do not match the query head");
    }
    if keys.rows() == 0 {
        return shape_err("attention over an empty cache");
    }
    let mut acc = vec![0.0; qh.len()];
    let mut max = f64::NEG_INFINITY;
    let mut z = 0.0;
    for j in 0..keys.rows() {
        let l = dot(qh, keys.row(j)) * scale;
        if l > max {
            let c = (max - l).exp();
            acc.iter_mut().for_each(|a| *a *= c);
            z *= c;
            max = l;
        }
        let w = (l - max).exp();
        z += w;
        axpy(&mut acc, w, values.row(j));
    }
    acc.iter_mut().for_each(|a| *a /= z);
    Ok(acc)
}

/// Softmax attention probabilities of one query head over cached key rows.
pub fn head_probs(qh: &[f64], keys: &Matrix, scale: f64) -> Result<Vec<f64>> {
    if keys.rows() == 0 {
        return shape_err("attention over an empty cache");
    }
    let logits: Vec<f64> = (0..keys.rows()).map(|j| dot(qh, keys.row(j)) * scale).collect();
    crate::math::softmax_stable(&logits)
}

fn check_shapes(q: &Matrix, k: &Matrix, v: &Matrix, layout: HeadLayout) -> Result<()> {
    if q.cols() != layout.q_width() {
        return shape_err(format!("query width {} != {}", q.cols(), layout.q_width()));
    }
    if k.cols() != layout.kv_width() || v.cols() != layout.kv_width() {
        return shape_err(format!(
            "key/value widths {}/{} != {}",
            k.cols(),
            v.cols(),
            layout.kv_width()
        ));
    }
    if k.rows() != v.rows() {
        return shape_err(format!("{} keys vs {} values", k.rows(), v.rows()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::Rng;

    #[test]
    fn layout_grouping() {
        let l = HeadLayout::new(8, 2, 8).unwrap();
        let groups: Vec<usize> = (0..8).map(|h| l.kv_head(h)).collect();
        assert_eq!(groups, vec![0, 0, 0, 0, 1, 1, 1, 1]);
        assert!(HeadLayout::new(8, 3, 8).is_err());
    }

    #[test]
    fn rope_position_zero_is_identity() {
        let mut x = vec![0.3, -1.0, 2.0, 0.5];
        let before = x.clone();
        rope_apply(&mut x, 4, 0.0, 10_000.0).unwrap();
        assert_eq!(x, before);
        assert!(rope_apply(&mut [0.0; 3], 3, 1.0, 10_000.0).is_err());
    }

    #[test]
    fn rope_preserves_norm_and_inverts() {
        let mut rng = Rng::new(1);
        let x = rng.normal_vec(8);
        let mut y = x.clone();
        rope_apply(&mut y, 8, 37.0, 10_000.0).unwrap();
        let nx: f64 = dot(&x, &x).sqrt();
        let ny: f64 = dot(&y, &y).sqrt();
        assert!((nx - ny).abs() < 1e-9);
        rope_apply(&mut y, 8, -37.0, 10_000.0).unwrap();
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rope_inner_product_depends_on_offset_only() {
        let mut rng = Rng::new(2);
        let q = rng.normal_vec(8);
        let k = rng.normal_vec(8);
        let ip = |m: f64, n: f64| {
            let mut a = q.clone();
            let mut b = k.clone();
            rope_rotate(&mut a, m, 10_000.0);
            rope_rotate(&mut b, n, 10_000.0);
            dot(&a, &b)
        };
        for _ in 0..50 {
            let m = rng.below(500) as f64;
            let n = rng.below(500) as f64;
            let shift = rng.below(300) as f64;
            assert!((ip(m, n) - ip(m + shift, n + shift)).abs() < 1e-9);
        }
    }

    #[test]
    fn single_token_attention_returns_value() {
        let l = HeadLayout::new(2, 1, 2).unwrap();
        let q = Matrix::from_rows(&[vec![1.0, 2.0, 3.0, 4.0]]).unwrap();
        let k = Matrix::from_rows(&[vec![0.5, -0.5]]).unwrap();
        let v = Matrix::from_rows(&[vec![7.0, 9.0]]).unwrap();
        let o = attention_full(&q, &k, &v, l, 0.5).unwrap();
        assert_eq!(o.row(0), &[7.0, 9.0, 7.0, 9.0]);
    }

    #[test]
    fn uniform_attention_averages_visible_values() {
        let l = HeadLayout::new(1, 1, 3).unwrap();
        let q = Matrix::zeros(3, 3);
        let k = Matrix::zeros(3, 3);
        let v = Matrix::from_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ])
        .unwrap();
        let o = attention_full(&q, &k, &v, l, 1.0).unwrap();
        assert_eq!(o.row(0), &[1.0, 0.0, 0.0]);
        assert_eq!(o.row(1), &[0.5, 0.5, 0.0]);
        for x in o.row(2) {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
    }
}
