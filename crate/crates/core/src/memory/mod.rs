//! Fast-weight latent memory that absorbs evicted key/value rows and
//! returns a gated readout added to the attention output.

mod train;

pub use train::{
    episode_loss, memory_gradients, memory_step, train_memory, MemoryEpisode, MemoryEvent, MemoryGrads,
};

use crate::attention::{rope_rotate, HeadLayout};
use crate::error::{invalid, shape_err, Result};
use crate::math::{dot, sigmoid, Matrix, Rng};

/// How per-kv-head values are widened to a token-level `d_model` vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ValueMode {
    /// Each kv head is repeated for every query head that reads it.
    #[default]
    Concat,
    /// kv heads are summed, and the sum is tiled into every head block.
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MemoryConfig {
    pub d_mem: usize,
    pub lambda: f64,
    pub eta: f64,
    pub eps: f64,
    pub value_mode: ValueMode,
    /// Treat fast weights as constants when differentiating.
    pub stop_gradient: bool,
}

impl MemoryConfig {
    pub fn for_model(d_model: usize) -> Self {
        Self {
            d_mem: (d_model / 8).max(1),
            lambda: 0.95,
            eta: 1.0,
            eps: 1e-6,
            value_mode: ValueMode::Concat,
            stop_gradient: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_mem == 0 {
            return invalid("d_mem must be positive");
        }
        check_rates(self.lambda, self.eta)?;
        if !(self.eps > 0.0) {
            return invalid("eps must be positive");
        }
        Ok(())
    }
}

fn check_rates(lambda: f64, eta: f64) -> Result<()> {
    if !(lambda > 0.0 && lambda <= 1.0) {
        return invalid(format!("decay {lambda} outside (0, 1]"));
    }
    if !(eta > 0.0) {
        return invalid(format!("write rate {eta} must be positive"));
    }
    Ok(())
}

/// Trained parameters of one layer's memory.
#[derive(Debug, Clone, PartialEq)]
pub struct MemorySlowWeights {
    /// Feature map `d_model -> d_mem`.
    pub w_phi: Matrix,
    pub b_phi: Vec<f64>,
    /// Gate weights over the query.
    pub w_g: Vec<f64>,
    pub bias: f64,
}

impl MemorySlowWeights {
    pub fn init(d_mem: usize, d_model: usize, rng: &mut Rng) -> Self {
        let std = 1.0 / (d_model as f64).sqrt();
        Self {
            w_phi: Matrix::random_normal(d_mem, d_model, std, rng),
            b_phi: vec![0.0; d_mem],
            w_g: (0..d_model).map(|_| 0.1 * std * rng.normal()).collect(),
            bias: 0.0,
        }
    }

    pub fn d_mem(&self) -> usize {
        self.w_phi.rows()
    }

    pub fn d_model(&self) -> usize {
        self.w_phi.cols()
    }

    pub fn features(&self, x: &[f64]) -> Vec<f64> {
        let mut f = self.w_phi.apply(x);
        f.iter_mut().zip(&self.b_phi).for_each(|(a, b)| *a += b);
        f
    }

    pub fn is_finite(&self) -> bool {
        self.w_phi.is_finite()
            && self.b_phi.iter().all(|v| v.is_finite())
            && self.w_g.iter().all(|v| v.is_finite())
            && self.bias.is_finite()
    }
}

/// Fast weights of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryState {
    pub m: Matrix,
    pub b: Vec<f64>,
}

impl MemoryState {
    pub fn zeros(d_mem: usize, d_model: usize) -> Self {
        Self {
            m: Matrix::zeros(d_mem, d_model),
            b: vec![0.0; d_mem],
        }
    }

    pub fn reset(&mut self) {
        self.m.scale(0.0);
        self.b.iter_mut().for_each(|v| *v = 0.0);
    }

    /// Number of stored floats: `d_mem * (d_model + 1)`.
    pub fn footprint(&self) -> usize {
        self.m.rows() * self.m.cols() + self.b.len()
    }

    pub fn bytes(&self) -> usize {
        self.footprint() * std::mem::size_of::<f64>()
    }
}

/// `m = phi(q)^T M / (phi(q)^2 . b + eps)`.
pub fn mem_read(slow: &MemorySlowWeights, state: &MemoryState, q: &[f64], eps: f64) -> Vec<f64> {
    let f = slow.features(q);
    let den: f64 = f.iter().zip(&state.b).map(|(x, b)| x * x * b).sum::<f64>() + eps;
    let mut m = state.m.apply_transpose(&f);
    m.iter_mut().for_each(|v| *v /= den);
    m
}

/// `M <- lambda M + eta sum phi(k) v^T`, `b <- lambda b + eta sum phi(k)^2`.
pub fn mem_write(
    slow: &MemorySlowWeights,
    state: &mut MemoryState,
    evicted: &[(Vec<f64>, Vec<f64>)],
    lambda: f64,
    eta: f64,
) -> Result<()> {
    check_rates(lambda, eta)?;
    let d = slow.d_model();
    if let Some((k, v)) = evicted.iter().find(|(k, v)| k.len() != d || v.len() != d) {
        return shape_err(format!("evicted row of {}/{} for d_model {d}", k.len(), v.len()));
    }
    if lambda != 1.0 {
        state.m.scale(lambda);
        state.b.iter_mut().for_each(|v| *v *= lambda);
    }
    for (k, v) in evicted {
        let f = slow.features(k);
        state.m.add_outer(eta, &f, v);
        state.b.iter_mut().zip(&f).for_each(|(b, x)| *b += eta * x * x);
    }
    Ok(())
}

pub fn gate(slow: &MemorySlowWeights, q: &[f64]) -> f64 {
    sigmoid(dot(&slow.w_g, q) + slow.bias)
}

/// `o_attn + g(q) m(q)`.
pub fn fuse(o_attn: &[f64], q: &[f64], slow: &MemorySlowWeights, state: &MemoryState, eps: f64) -> Vec<f64> {
    let m = mem_read(slow, state, q, eps);
    let g = gate(slow, q);
    o_attn.iter().zip(&m).map(|(o, r)| o + g * r).collect()
}

/// Token-level `d_model` key and value from a cached kv row: keys are
/// rotated back to their pre-RoPE form, then both are widened per `mode`.
pub fn token_kv(
    k_row: &[f64],
    v_row: &[f64],
    pos: usize,
    layout: HeadLayout,
    rope_base: f64,
    mode: ValueMode,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if k_row.len() != layout.kv_width() || v_row.len() != layout.kv_width() {
        return shape_err("kv row does not match the head layout");
    }
    let mut k = k_row.to_vec();
    for chunk in k.chunks_mut(layout.d_head) {
        rope_rotate(chunk, -(pos as f64), rope_base);
    }
    Ok((widen(&k, layout, mode), widen(v_row, layout, mode)))
}

/// Widens a `kv_width` row to `q_width`.
pub fn widen(row: &[f64], layout: HeadLayout, mode: ValueMode) -> Vec<f64> {
    let dh = layout.d_head;
    match mode {
        ValueMode::Concat => (0..layout.n_heads)
            .flat_map(|h| layout.head(row, layout.kv_head(h)).iter().copied())
            .collect(),
        ValueMode::Sum => {
            let mut s = vec![0.0; dh];
            for g in 0..layout.n_kv_heads {
                s.iter_mut().zip(layout.head(row, g)).for_each(|(a, b)| *a += b);
            }
            (0..layout.n_heads).flat_map(|_| s.iter().copied()).collect()
        }
    }
}

/// Slow weights plus fast state of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerMemory {
    pub slow: MemorySlowWeights,
    pub state: MemoryState,
    written: bool,
}

impl LayerMemory {
    pub fn new(slow: MemorySlowWeights) -> Self {
        let state = MemoryState::zeros(slow.d_mem(), slow.d_model());
        Self {
            slow,
            state,
            written: false,
        }
    }

    pub fn write(&mut self, cfg: &MemoryConfig, evicted: &[(Vec<f64>, Vec<f64>)]) -> Result<()> {
        mem_write(&self.slow, &mut self.state, evicted, cfg.lambda, cfg.eta)?;
        self.written = true;
        Ok(())
    }

    /// Fused output; the attention output passes through untouched until
    /// the first write.
    pub fn fuse(&self, cfg: &MemoryConfig, o_attn: &[f64], q: &[f64]) -> Vec<f64> {
        if !self.written {
            return o_attn.to_vec();
        }
        fuse(o_attn, q, &self.slow, &self.state, cfg.eps)
    }

    pub fn is_written(&self) -> bool {
        self.written
    }
}
