//! Frozen random-weight transformer used as distillation teacher and as the
//! ground truth for full-cache attention outputs.

mod planted;

pub use planted::{planted_retrieval, sample_needles, PlantedConfig, PlantedSequence};

use crate::attention::{attention_full, rope_apply, HeadLayout};
use crate::error::{invalid, shape_err, Result};
use crate::math::{dot, mix64, rmsnorm, Matrix, Rng};

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub d_ffn: usize,
    pub rope_base: f64,
    pub vocab_size: usize,
    pub seed: u64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            d_model: 64,
            n_heads: 8,
            n_kv_heads: 2,
            d_ffn: 128,
            rope_base: 10_000.0,
            vocab_size: 256,
            seed: 0,
        }
    }
}

impl TeacherConfig {
    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn layout(&self) -> Result<HeadLayout> {
        HeadLayout::new(self.n_heads, self.n_kv_heads, self.d_head())
    }

    /// Logit scale `1 / sqrt(d_model)` used by every attention softmax.
    pub fn attn_scale(&self) -> f64 {
        1.0 / (self.d_model as f64).sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.n_kv_heads == 0 {
            return invalid("d_model and head counts must be positive");
        }
        if self.d_model % self.n_heads != 0 {
            return invalid(format!("d_model {} not divisible by {} heads", self.d_model, self.n_heads));
        }
        if self.n_heads % self.n_kv_heads != 0 {
            return invalid(format!(
                "{} query heads not divisible by {} kv heads",
                self.n_heads, self.n_kv_heads
            ));
        }
        if self.d_head() % 2 != 0 {
            return invalid(format!("rotary embedding needs an even head dim, got {}", self.d_head()));
        }
        if self.d_ffn == 0 || self.vocab_size == 0 {
            return invalid("d_ffn and vocab_size must be positive");
        }
        if !(self.rope_base > 1.0) {
            return invalid("rope_base must exceed 1");
        }
        Ok(())
    }
}

/// One pre-norm block: attention then a SiLU MLP, each with a residual.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherLayer {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    pub w_up: Matrix,
    pub w_down: Matrix,
    pub attn_norm: Vec<f64>,
    pub ffn_norm: Vec<f64>,
}

/// Projections of a single token at one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RowProjection {
    pub q_pre: Vec<f64>,
    pub q: Vec<f64>,
    pub k_pre: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
}

impl TeacherLayer {
    fn init(cfg: &TeacherConfig, rng: &mut Rng) -> Self {
        let d = cfg.d_model;
        let dh = cfg.d_head();
        let std = 1.0 / (d as f64).sqrt();
        Self {
            w_q: Matrix::random_normal(cfg.n_heads * dh, d, std, rng),
            w_k: Matrix::random_normal(cfg.n_kv_heads * dh, d, std, rng),
            w_v: Matrix::random_normal(cfg.n_kv_heads * dh, d, std, rng),
            w_o: Matrix::random_normal(d, cfg.n_heads * dh, std, rng),
            w_up: Matrix::random_normal(cfg.d_ffn, d, std, rng),
            w_down: Matrix::random_normal(d, cfg.d_ffn, std, rng),
            attn_norm: vec![1.0; d],
            ffn_norm: vec![1.0; d],
        }
    }

    pub fn attn_input(&self, x: &[f64]) -> Vec<f64> {
        let mut h = rmsnorm(x);
        h.iter_mut().zip(&self.attn_norm).for_each(|(a, w)| *a *= w);
        h
    }

    pub fn project_row(&self, x: &[f64], pos: usize, cfg: &TeacherConfig) -> RowProjection {
        let h = self.attn_input(x);
        let q_pre = self.w_q.apply(&h);
        let k_pre = self.w_k.apply(&h);
        let v = self.w_v.apply(&h);
        let dh = cfg.d_head();
        let mut q = q_pre.clone();
        let mut k = k_pre.clone();
        // d_head parity is checked by validate()
        rope_apply(&mut q, dh, pos as f64, cfg.rope_base).expect("validated head dim");
        rope_apply(&mut k, dh, pos as f64, cfg.rope_base).expect("validated head dim");
        RowProjection {
            q_pre,
            q,
            k_pre,
            k,
            v,
        }
    }

    /// Output projection, residual, and feed-forward block for one token
    /// given its concatenated head outputs `o`.
    pub fn finish_row(&self, x: &[f64], o: &[f64]) -> Vec<f64> {
        let a = self.w_o.apply(o);
        let x1: Vec<f64> = x.iter().zip(&a).map(|(u, v)| u + v).collect();
        let mut h = rmsnorm(&x1);
        h.iter_mut().zip(&self.ffn_norm).for_each(|(a, w)| *a *= w);
        let up: Vec<f64> = self.w_up.apply(&h).into_iter().map(silu).collect();
        let f = self.w_down.apply(&up);
        x1.iter().zip(&f).map(|(u, v)| u + v).collect()
    }
}

fn silu(x: f64) -> f64 {
    x * crate::math::sigmoid(x)
}

/// Everything a layer computed during a full-sequence forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    /// Layer input hidden states, `L x d_model`.
    pub x: Matrix,
    /// Pre-RoPE queries, `L x H*d_head` (head-major).
    pub q_pre: Matrix,
    pub q: Matrix,
    pub k_pre: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    /// Concatenated head outputs before `W_o`, `L x d_model`.
    pub o_full: Matrix,
    /// Layer output hidden states.
    pub out: Matrix,
}

impl LayerTrace {
    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    /// Dense teacher importance: `max` over heads and queries `s` in `q_set`
    /// (with `s >= t`) of the attention logit `q_s . k_t * scale`. Keys no query
    /// can see get `-inf`.
    pub fn pooled_importance(&self, q_set: &[usize], layout: HeadLayout, scale: f64) -> Vec<f64> {
        let n = self.len();
        let mut imp = vec![f64::NEG_INFINITY; n];
        for &s in q_set {
            let qs = self.q.row(s);
            for (t, it) in imp.iter_mut().enumerate().take(s + 1) {
                let kt = self.k.row(t);
                for h in 0..layout.n_heads {
                    let l = dot(layout.head(qs, h), layout.head(kt, layout.kv_head(h))) * scale;
                    if l > *it {
                        *it = l;
                    }
                }
            }
        }
        imp
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherModel {
    config: TeacherConfig,
    layout: HeadLayout,
    embedding: Matrix,
    layers: Vec<TeacherLayer>,
}

impl TeacherModel {
    pub fn new(config: TeacherConfig) -> Result<Self> {
        config.validate()?;
        let layout = config.layout()?;
        let root = Rng::new(config.seed);
        let mut emb_rng = root.split(u64::MAX);
        let embedding = Matrix::random_normal(config.vocab_size, config.d_model, 1.0, &mut emb_rng);
        let layers = (0..config.n_layers)
            .map(|l| TeacherLayer::init(&config, &mut root.split(l as u64)))
            .collect();
        Ok(Self {
            config,
            layout,
            embedding,
            layers,
        })
    }

    pub fn config(&self) -> &TeacherConfig {
        &self.config
    }

    pub fn layout(&self) -> HeadLayout {
        self.layout
    }

    pub fn layers(&self) -> &[TeacherLayer] {
        &self.layers
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Order-sensitive hash of every weight bit.
    pub fn weight_checksum(&self) -> u64 {
        let mut h = 0u64;
        let mut eat = |xs: &[f64]| {
            for x in xs {
                h = mix64(h ^ x.to_bits());
            }
        };
        eat(self.embedding.as_slice());
        for l in &self.layers {
            for m in [&l.w_q, &l.w_k, &l.w_v, &l.w_o, &l.w_up, &l.w_down] {
                eat(m.as_slice());
            }
            eat(&l.attn_norm);
            eat(&l.ffn_norm);
        }
        h
    }

    /// Looks up the fixed random embedding of each token id.
    pub fn embed(&self, tokens: &[usize]) -> Result<Matrix> {
        let mut x = Matrix::zeros(tokens.len(), self.config.d_model);
        for (i, &t) in tokens.iter().enumerate() {
            if t >= self.config.vocab_size {
                return invalid(format!("token {t} outside vocabulary of {}", self.config.vocab_size));
            }
            x.row_mut(i).copy_from_slice(self.embedding.row(t));
        }
        Ok(x)
    }

    pub fn forward_tokens(&self, tokens: &[usize]) -> Result<Vec<LayerTrace>> {
        self.forward(&self.embed(tokens)?)
    }

    /// Full causal forward pass from injected hidden states `x0`.
    pub fn forward(&self, x0: &Matrix) -> Result<Vec<LayerTrace>> {
        if x0.rows() == 0 {
            return invalid("forward over an empty sequence");
        }
        if x0.cols() != self.config.d_model {
            return shape_err(format!("input width {} != d_model {}", x0.cols(), self.config.d_model));
        }
        let mut traces = Vec::with_capacity(self.layers.len());
        let mut x = x0.clone();
        for layer in &self.layers {
            let trace = Self::run_layer(self, layer, x)?;
            x = trace.out.clone();
            traces.push(trace);
        }
        Ok(traces)
    }

    /// Full causal pass of layer `l` over input rows `x` at positions `0..`.
    pub fn forward_layer(&self, l: usize, x: Matrix) -> Result<LayerTrace> {
        let layer = self
            .layers
            .get(l)
            .ok_or_else(|| crate::Error::InvalidArgument(format!("layer {l} out of range")))?;
        if x.rows() == 0 || x.cols() != self.config.d_model {
            return shape_err("layer input must be non-empty and d_model wide");
        }
        self.run_layer(layer, x)
    }

    fn run_layer(&self, layer: &TeacherLayer, x: Matrix) -> Result<LayerTrace> {
        let n = x.rows();
        let lay = self.layout;
        let mut q_pre = Matrix::zeros(n, lay.q_width());
        let mut q = Matrix::zeros(n, lay.q_width());
        let mut k_pre = Matrix::zeros(n, lay.kv_width());
        let mut k = Matrix::zeros(n, lay.kv_width());
        let mut v = Matrix::zeros(n, lay.kv_width());
        for i in 0..n {
            let p = layer.project_row(x.row(i), i, &self.config);
            q_pre.row_mut(i).copy_from_slice(&p.q_pre);
            q.row_mut(i).copy_from_slice(&p.q);
            k_pre.row_mut(i).copy_from_slice(&p.k_pre);
            k.row_mut(i).copy_from_slice(&p.k);
            v.row_mut(i).copy_from_slice(&p.v);
        }
        let o_full = attention_full(&q, &k, &v, lay, self.config.attn_scale())?;
        let mut out = Matrix::zeros(n, self.config.d_model);
        for i in 0..n {
            out.row_mut(i).copy_from_slice(&layer.finish_row(x.row(i), o_full.row(i)));
        }
        Ok(LayerTrace {
            x,
            q_pre,
            q,
            k_pre,
            k,
            v,
            o_full,
            out,
        })
    }
}
