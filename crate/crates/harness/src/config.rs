//! Experiment configuration: strict JSON, versioned, hashed into every record.

use std::path::Path;

use kvgate_core::cache::CompressionPlan;
use kvgate_core::crosslayer::{Aggregation, SkipDirection};
use kvgate_core::engine::EvictionSetup;
use kvgate_core::indexer::IndexerConfig;
use kvgate_core::math::ProbMode;
use kvgate_core::memory::{MemoryConfig, ValueMode};
use kvgate_core::optim::WsdSchedule;
use kvgate_core::policy::{HeadPool, PolicyId};
use kvgate_core::teacher::{PlantedConfig, TeacherConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{HarnessError, Result};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    #[serde(default = "default_experiment")]
    pub experiment: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub teacher: TeacherSection,
    #[serde(default)]
    pub plan: PlanSection,
    #[serde(default)]
    pub policy: PolicySection,
    #[serde(default)]
    pub aggregation: AggregationSection,
    #[serde(default = "one")]
    pub reuse_group: usize,
    #[serde(default)]
    pub per_head: bool,
    #[serde(default)]
    pub indexer: IndexerSection,
    #[serde(default)]
    pub memory: MemorySection,
    #[serde(default)]
    pub training: TrainingSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub decode: DecodeSection,
}

fn default_experiment() -> String {
    "desk".into()
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherSection {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub d_ffn: usize,
    pub rope_base: f64,
    pub vocab_size: usize,
    pub seed: u64,
}

impl Default for TeacherSection {
    fn default() -> Self {
        let t = TeacherConfig::default();
        Self {
            n_layers: t.n_layers,
            d_model: t.d_model,
            n_heads: t.n_heads,
            n_kv_heads: t.n_kv_heads,
            d_ffn: t.d_ffn,
            rope_base: t.rope_base,
            vocab_size: t.vocab_size,
            seed: t.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanSection {
    pub ratio: f64,
    pub interval: usize,
    pub budget: usize,
    pub sinks: usize,
    pub local_window: usize,
}

impl Default for PlanSection {
    fn default() -> Self {
        let p = CompressionPlan::default();
        Self {
            ratio: p.ratio,
            interval: p.interval,
            budget: p.budget,
            sinks: p.sinks,
            local_window: p.local_window,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolSection {
    #[default]
    Mean,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PolicySection {
    Snapkv {
        window: usize,
        #[serde(default)]
        pool: PoolSection,
    },
    Knorm,
    Tova,
    #[default]
    Indexer,
    Random {
        seed: u64,
    },
}

impl PolicySection {
    pub fn to_core(self) -> PolicyId {
        match self {
            PolicySection::Snapkv { window, pool } => PolicyId::SnapKv {
                window,
                pool: match pool {
                    PoolSection::Mean => HeadPool::Mean,
                    PoolSection::Max => HeadPool::Max,
                },
            },
            PolicySection::Knorm => PolicyId::Knorm,
            PolicySection::Tova => PolicyId::Tova,
            PolicySection::Indexer => PolicyId::Indexer,
            PolicySection::Random { seed } => PolicyId::Random { seed },
        }
    }

    pub fn name(self) -> &'static str {
        self.to_core().name()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProbSection {
    Softmax { temperature: f64 },
    Negonly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectionSection {
    SkipHigh,
    SkipLow,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AggregationSection {
    #[default]
    None,
    LayerMean,
    EntropyGated {
        gamma: f64,
        prob: ProbSection,
        direction: DirectionSection,
    },
}

impl AggregationSection {
    pub fn to_core(self) -> Aggregation {
        match self {
            AggregationSection::None => Aggregation::None,
            AggregationSection::LayerMean => Aggregation::LayerMean,
            AggregationSection::EntropyGated { gamma, prob, direction } => Aggregation::EntropyGated {
                gamma,
                prob: match prob {
                    ProbSection::Softmax { temperature } => ProbMode::Softmax { temperature },
                    ProbSection::Negonly => ProbMode::NegOnly,
                },
                direction: match direction {
                    DirectionSection::SkipHigh => SkipDirection::SkipHigh,
                    DirectionSection::SkipLow => SkipDirection::SkipLow,
                },
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IndexerSection {
    pub n_heads: usize,
    pub d_index: usize,
}

impl Default for IndexerSection {
    fn default() -> Self {
        Self { n_heads: 2, d_index: 4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueModeSection {
    #[default]
    Concat,
    Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MemorySection {
    /// Feature width; `None` means `d_model / 8`.
    pub d_mem: Option<usize>,
    pub lambda: f64,
    pub eta: f64,
    pub eps: f64,
    pub value_mode: ValueModeSection,
    pub stop_gradient: bool,
}

impl Default for MemorySection {
    fn default() -> Self {
        let m = MemoryConfig::for_model(64);
        Self {
            d_mem: None,
            lambda: m.lambda,
            eta: m.eta,
            eps: m.eps,
            value_mode: ValueModeSection::Concat,
            stop_gradient: m.stop_gradient,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub warmup: usize,
    pub stable: usize,
    pub decay: usize,
    pub peak: f64,
    pub final_lr: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        let s = WsdSchedule::default();
        Self {
            warmup: s.warmup,
            stable: s.stable,
            decay: s.decay,
            peak: s.peak,
            final_lr: s.final_lr,
        }
    }
}

impl ScheduleSection {
    pub fn to_core(self) -> WsdSchedule {
        WsdSchedule {
            warmup: self.warmup,
            stable: self.stable,
            decay: self.decay,
            peak: self.peak,
            final_lr: self.final_lr,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageSection {
    pub schedule: ScheduleSection,
    /// Optimizer steps; `None` runs the whole schedule.
    pub steps: Option<usize>,
    /// Sequences per step.
    pub batch: usize,
    pub clip: f64,
}

impl Default for StageSection {
    fn default() -> Self {
        Self {
            schedule: ScheduleSection::default(),
            steps: None,
            batch: 4,
            clip: 1.0,
        }
    }
}

impl StageSection {
    pub fn steps(&self) -> usize {
        self.steps.unwrap_or_else(|| self.schedule.to_core().total_steps())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub indexer: StageSection,
    pub memory: StageSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub n_train: usize,
    pub n_eval: usize,
    pub prompt_len: usize,
    /// Rows forced after the prompt and scored against the full cache.
    pub n_probes: usize,
    pub needles: usize,
    pub query_tail: usize,
    pub needle_cosine: f64,
    pub tail_cosine: f64,
    pub key_boost: f64,
    pub key_damp: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        let p = PlantedConfig::default();
        Self {
            n_train: 64,
            n_eval: 32,
            prompt_len: 128,
            n_probes: 16,
            needles: 4,
            query_tail: p.query_tail,
            needle_cosine: p.needle_cosine,
            tail_cosine: p.tail_cosine,
            key_boost: p.key_boost,
            key_damp: p.key_damp,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub ratios: Vec<f64>,
    pub policies: Vec<PolicySection>,
    pub use_memory: bool,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            ratios: vec![0.0, 0.1, 0.25, 0.5, 0.75, 0.9],
            policies: vec![
                PolicySection::Indexer,
                PolicySection::Snapkv { window: 8, pool: PoolSection::Mean },
                PolicySection::Knorm,
                PolicySection::Tova,
                PolicySection::Random { seed: 0 },
            ],
            use_memory: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeSection {
    pub prompt_len: usize,
    pub steps: usize,
    pub budgets: Vec<usize>,
    /// Std of the noise added to each fed-back hidden state.
    pub noise: f64,
    pub use_memory: bool,
}

impl Default for DecodeSection {
    fn default() -> Self {
        Self {
            prompt_len: 128,
            steps: 2000,
            budgets: vec![64, 128, 192, 256],
            noise: 0.1,
            use_memory: false,
        }
    }
}

fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(HarnessError::Config(msg.into()))
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return config_err(format!("config version {} unsupported (expected {CONFIG_VERSION})", self.version));
        }
        self.teacher_config().validate()?;
        self.eviction_setup(self.policy).validate()?;
        self.indexer_config().validate()?;
        self.memory_config().validate()?;
        for stage in [&self.training.indexer, &self.training.memory] {
            stage.schedule.to_core().validate()?;
            if stage.batch == 0 || !(stage.clip > 0.0) {
                return config_err("training batch and clip must be positive");
            }
        }
        let d = &self.data;
        if d.n_train == 0 || d.n_eval == 0 {
            return config_err("data needs training and evaluation sequences");
        }
        let lo = self.plan.sinks;
        let hi = d.prompt_len.saturating_sub(self.plan.local_window.max(d.query_tail));
        if d.needles > hi.saturating_sub(lo) {
            return config_err(format!("cannot place {} needles between {lo} and {hi}", d.needles));
        }
        if self.sweep.ratios.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return config_err("sweep ratios must lie in [0, 1]");
        }
        for p in &self.sweep.policies {
            self.eviction_setup(*p).validate()?;
        }
        if self.decode.prompt_len == 0 || self.decode.budgets.is_empty() {
            return config_err("decode simulation needs a prompt and at least one budget");
        }
        for &b in &self.decode.budgets {
            let plan = CompressionPlan { budget: b, ..self.plan() };
            plan.validate()?;
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn teacher_config(&self) -> TeacherConfig {
        let t = &self.teacher;
        TeacherConfig {
            n_layers: t.n_layers,
            d_model: t.d_model,
            n_heads: t.n_heads,
            n_kv_heads: t.n_kv_heads,
            d_ffn: t.d_ffn,
            rope_base: t.rope_base,
            vocab_size: t.vocab_size,
            seed: t.seed,
        }
    }

    pub fn plan(&self) -> CompressionPlan {
        let p = &self.plan;
        CompressionPlan {
            ratio: p.ratio,
            interval: p.interval,
            budget: p.budget,
            sinks: p.sinks,
            local_window: p.local_window,
        }
    }

    pub fn eviction_setup(&self, policy: PolicySection) -> EvictionSetup {
        EvictionSetup {
            plan: self.plan(),
            policy: policy.to_core(),
            aggregation: self.aggregation.to_core(),
            reuse_group: self.reuse_group,
            per_head: self.per_head,
        }
    }

    pub fn indexer_config(&self) -> IndexerConfig {
        IndexerConfig {
            n_heads: self.indexer.n_heads,
            d_index: self.indexer.d_index,
        }
    }

    pub fn memory_config(&self) -> MemoryConfig {
        let m = &self.memory;
        let base = MemoryConfig::for_model(self.teacher.d_model);
        MemoryConfig {
            d_mem: m.d_mem.unwrap_or(base.d_mem),
            lambda: m.lambda,
            eta: m.eta,
            eps: m.eps,
            value_mode: match m.value_mode {
                ValueModeSection::Concat => ValueMode::Concat,
                ValueModeSection::Sum => ValueMode::Sum,
            },
            stop_gradient: m.stop_gradient,
        }
    }

    pub fn planted(&self) -> PlantedConfig {
        let d = &self.data;
        PlantedConfig {
            query_tail: d.query_tail,
            needle_cosine: d.needle_cosine,
            tail_cosine: d.tail_cosine,
            key_boost: d.key_boost,
            key_damp: d.key_damp,
            ..PlantedConfig::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<ExperimentConfig> {
        let c: ExperimentConfig = serde_json::from_str(s).map_err(|e| HarnessError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    #[test]
    fn minimal_config_takes_defaults() {
        let c = parse(r#"{"version": 1}"#).unwrap();
        assert_eq!(c.plan.interval, 128);
        assert_eq!(c.plan.sinks, 4);
        assert_eq!(c.sweep.ratios, vec![0.0, 0.1, 0.25, 0.5, 0.75, 0.9]);
        assert_eq!(c.policy, PolicySection::Indexer);
        assert_eq!(c.training.indexer.schedule.peak, 1e-3);
        assert_eq!(c.training.indexer.steps(), 4100);
    }

    #[test]
    fn unknown_keys_and_versions_are_rejected() {
        assert!(parse(r#"{"version": 1, "ratoi": 0.5}"#).is_err());
        assert!(parse(r#"{"version": 1, "plan": {"ratio": 0.5, "budgte": 3}}"#).is_err());
        assert!(parse(r#"{"version": 2}"#).is_err());
        assert!(parse(r#"{}"#).is_err());
        assert!(parse(r#"{"version": 1, "policy": {"kind": "snapkv", "window": 4, "extra": 1}}"#).is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(parse(r#"{"version": 1, "plan": {"ratio": 1.5}}"#).is_err());
        assert!(parse(r#"{"version": 1, "plan": {"budget": 10}}"#).is_err());
        assert!(parse(r#"{"version": 1, "reuse_group": 0}"#).is_err());
        assert!(parse(r#"{"version": 1, "per_head": true}"#).is_err());
    }

    #[test]
    fn tagged_sections_parse() {
        let c = parse(
            r#"{"version": 1,
                "policy": {"kind": "snapkv", "window": 16, "pool": "max"},
                "aggregation": {"kind": "entropy_gated", "gamma": 0.8,
                                "prob": {"kind": "softmax", "temperature": 1.0},
                                "direction": "skip_high"}}"#,
        )
        .unwrap();
        assert_eq!(c.policy.to_core(), PolicyId::SnapKv { window: 16, pool: HeadPool::Max });
        assert!(matches!(c.aggregation.to_core(), Aggregation::EntropyGated { .. }));
    }

    #[test]
    fn hash_tracks_content() {
        let a = parse(r#"{"version": 1}"#).unwrap();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 9;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
