//! Synthetic retrieval sequences with planted high-importance keys.
//!
//! A sequence is isotropic noise except for a query tail (the last
//! `query_tail` rows) and a few needle rows. Tail rows share one direction
//! chosen to give a strong query in `needle_head` at layer 0. Each needle row
//! is solved so that its layer-0 key in that head's kv group points (up to
//! `needle_cosine`) at the tail queries pulled back through RoPE. A needle's
//! key norm summed over kv heads is copied from a freshly drawn filler row,
//! so key magnitude alone says little about which rows matter.

use crate::attention::rope_rotate;
use crate::error::{invalid, Result};
use crate::math::{dot, norm2, solve_spd, Matrix, Rng};
use crate::teacher::TeacherModel;

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedConfig {
    pub query_tail: usize,
    pub needle_cosine: f64,
    pub tail_cosine: f64,
    pub needle_head: usize,
    /// Share weight of the planted kv group in a needle's total key norm.
    pub key_boost: f64,
    /// Share weight of each other kv group.
    pub key_damp: f64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        Self {
            query_tail: 8,
            needle_cosine: 0.95,
            tail_cosine: 0.95,
            needle_head: 0,
            key_boost: 1.6,
            key_damp: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedSequence {
    pub x0: Matrix,
    /// Planted positions, ascending.
    pub needles: Vec<usize>,
    pub tail_start: usize,
}

impl PlantedConfig {
    pub fn validate(&self, teacher: &TeacherModel) -> Result<()> {
        if self.query_tail == 0 {
            return invalid("query_tail must be at least 1");
        }
        if !(self.needle_cosine > 0.0 && self.needle_cosine <= 1.0) {
            return invalid("needle_cosine must lie in (0, 1]");
        }
        if !(self.tail_cosine > 0.0 && self.tail_cosine <= 1.0) {
            return invalid("tail_cosine must lie in (0, 1]");
        }
        if self.needle_head >= teacher.config().n_heads {
            return invalid(format!("needle_head {} out of range", self.needle_head));
        }
        if !(self.key_boost > 0.0 && self.key_damp >= 0.0) {
            return invalid("key_boost must be positive and key_damp non-negative");
        }
        if teacher.n_layers() == 0 {
            return invalid("planting needs at least one teacher layer");
        }
        Ok(())
    }
}

/// `count` distinct needle positions in `[lo, hi)`, ascending.
pub fn sample_needles(rng: &mut Rng, count: usize, lo: usize, hi: usize) -> Result<Vec<usize>> {
    if hi < lo || count > hi - lo {
        return invalid(format!("cannot place {count} needles in [{lo}, {hi})"));
    }
    Ok(rng.sample_distinct(hi - lo, count).into_iter().map(|p| p + lo).collect())
}

pub fn planted_retrieval(
    teacher: &TeacherModel,
    cfg: &PlantedConfig,
    needles: &[usize],
    len: usize,
    rng: &mut Rng,
) -> Result<PlantedSequence> {
    cfg.validate(teacher)?;
    if cfg.query_tail >= len {
        return invalid(format!("query tail {} leaves no room in {len} rows", cfg.query_tail));
    }
    let tail_start = len - cfg.query_tail;
    let mut needles = needles.to_vec();
    needles.sort_unstable();
    if needles.windows(2).any(|w| w[0] == w[1]) {
        return invalid("duplicate needle positions");
    }
    if let Some(&p) = needles.last() {
        if p >= tail_start {
            return invalid(format!("needle {p} overlaps the query tail starting at {tail_start}"));
        }
    }

    let tcfg = teacher.config();
    let d = tcfg.d_model;
    let dh = tcfg.d_head();
    let lay = teacher.layout();
    let layer = &teacher.layers()[0];
    let radius = (d as f64).sqrt();

    let mut x0 = Matrix::zeros(len, d);
    for i in 0..len {
        x0.row_mut(i).copy_from_slice(&rng.normal_vec(d));
    }

    let h = cfg.needle_head;
    let head_block = Matrix::from_vec(
        dh,
        d,
        layer.w_q.as_slice()[h * dh * d..(h + 1) * dh * d].to_vec(),
    )?;
    let query_dir = top_right_singular(&head_block, &mut rng.split(0x51));
    for s in tail_start..len {
        let row = mix_direction(&query_dir, cfg.tail_cosine, rng);
        for (dst, v) in x0.row_mut(s).iter_mut().zip(&row) {
            *dst = radius * v;
        }
    }

    let g = lay.kv_head(h);
    let gram = gram_rows(&layer.w_k);

    let tail_queries: Vec<(usize, Vec<f64>)> = (tail_start..len)
        .map(|s| {
            let p = layer.project_row(x0.row(s), s, tcfg);
            (s, lay.head(&p.q, h).to_vec())
        })
        .collect();

    for &p in &needles {
        let mut pulled = vec![0.0; dh];
        for (_, q) in &tail_queries {
            let mut back = q.clone();
            rope_rotate(&mut back, -(p as f64), tcfg.rope_base);
            pulled.iter_mut().zip(&back).for_each(|(a, b)| *a += b);
        }
        let unit = normalized(&pulled);
        let key_dir = mix_direction(&unit, cfg.needle_cosine, rng);

        let filler = layer.project_row(&rng.normal_vec(d), p, tcfg).k_pre;
        let total: f64 = filler.chunks(dh).map(norm2).sum();
        let shares = cfg.key_boost + (lay.n_kv_heads - 1) as f64 * cfg.key_damp;
        let mut target = vec![0.0; lay.kv_width()];
        for grp in 0..lay.n_kv_heads {
            let (dir, weight) = if grp == g {
                (key_dir.clone(), cfg.key_boost)
            } else {
                (normalized(&rng.normal_vec(dh)), cfg.key_damp)
            };
            let norm = total * weight / shares;
            for (j, v) in dir.iter().enumerate() {
                target[grp * dh + j] = norm * v;
            }
        }

        let in_range = layer.w_k.apply_transpose(&solve_spd(&gram, &target)?);
        let noise = rng.normal_vec(d);
        let noise_proj = layer.w_k.apply_transpose(&solve_spd(&gram, &layer.w_k.apply(&noise))?);
        let null: Vec<f64> = noise.iter().zip(&noise_proj).map(|(a, b)| a - b).collect();
        let r2 = dot(&in_range, &in_range);
        let row: Vec<f64> = if r2 < d as f64 {
            let a = ((d as f64 - r2) / dot(&null, &null).max(1e-300)).sqrt();
            in_range.iter().zip(&null).map(|(u, n)| u + a * n).collect()
        } else {
            let s = radius / r2.sqrt();
            in_range.iter().map(|u| u * s).collect()
        };
        x0.row_mut(p).copy_from_slice(&row);
    }

    Ok(PlantedSequence {
        x0,
        needles,
        tail_start,
    })
}

fn normalized(x: &[f64]) -> Vec<f64> {
    let n = norm2(x).max(1e-300);
    x.iter().map(|v| v / n).collect()
}

/// Unit vector with cosine `cos` to the unit vector `dir`, the rest random.
fn mix_direction(dir: &[f64], cos: f64, rng: &mut Rng) -> Vec<f64> {
    let mut noise = rng.normal_vec(dir.len());
    let c = dot(&noise, dir);
    noise.iter_mut().zip(dir).for_each(|(n, u)| *n -= c * u);
    let perp = normalized(&noise);
    let sin = (1.0 - cos * cos).max(0.0).sqrt();
    dir.iter().zip(&perp).map(|(u, p)| cos * u + sin * p).collect()
}

/// `W W^T` for a row-major `W`.
fn gram_rows(w: &Matrix) -> Matrix {
    let n = w.rows();
    let mut g = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = dot(w.row(i), w.row(j));
            g.set(i, j, v);
            g.set(j, i, v);
        }
    }
    g
}

fn top_right_singular(b: &Matrix, rng: &mut Rng) -> Vec<f64> {
    let mut v = normalized(&rng.normal_vec(b.cols()));
    for _ in 0..500 {
        v = normalized(&b.apply_transpose(&b.apply(&v)));
    }
    v
}
