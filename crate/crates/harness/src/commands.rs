//! The CLI subcommands. Each writes only into its output directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use kvgate_core::cache::CompressionPlan;
use kvgate_core::engine::{Engine, EvictionSetup};
use kvgate_core::indexer::IndexerParams;
use kvgate_core::math::{sq_dist, Matrix, Rng};
use kvgate_core::memory::MemorySlowWeights;
use kvgate_core::policy::PolicyId;
use kvgate_core::teacher::TeacherModel;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{ExperimentConfig, PolicySection};
use crate::error::{HarnessError, Result};
use crate::metrics::{read_records, MetricsRecord, MetricsWriter, Timing, SCHEMA_VERSION};
use crate::pipeline::{self, SampleMetrics};
use crate::weights::WeightsContainer;

pub const INDEXER_CHECKPOINT: &str = "indexer.kvgw";
pub const MODEL_CHECKPOINT: &str = "model.kvgw";

/// Inputs shared by the experiment commands.
#[derive(Debug, Clone)]
pub struct RunArgs {
    pub config: PathBuf,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub checkpoint: Option<PathBuf>,
    pub freeze_indexer: bool,
}

impl RunArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        std::fs::create_dir_all(&self.out).map_err(|e| HarnessError::io(&self.out, e))?;
        Ok(cfg)
    }

    fn checkpoint(&self) -> Result<Option<WeightsContainer>> {
        self.checkpoint.as_deref().map(WeightsContainer::load).transpose()
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("summary serializes");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| HarnessError::io(path, e))
}

/// Stable label of a policy, distinguishing parameterized variants.
pub fn policy_label(p: PolicySection) -> String {
    match p {
        PolicySection::Snapkv { window, .. } => format!("snapkv_w{window}"),
        PolicySection::Random { seed } => format!("random_s{seed}"),
        other => other.name().to_string(),
    }
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

#[derive(Serialize)]
struct LayerLosses {
    init: Vec<f64>,
    trained: Vec<f64>,
}

pub fn train_indexer(args: &RunArgs) -> Result<()> {
    let cfg = args.load()?;
    let mut timing = Timing::new(&args.out, "train-indexer");
    let t = pipeline::teacher(&cfg)?;
    let train = pipeline::samples(&t, &cfg, pipeline::STREAM_TRAIN, cfg.data.n_train)?;
    let eval = pipeline::samples(&t, &cfg, pipeline::STREAM_EVAL, cfg.data.n_eval)?;
    let train_b = pipeline::distill_batches(&t, &cfg, &train)?;
    let eval_b = pipeline::distill_batches(&t, &cfg, &eval)?;
    timing.mark("data");

    let mut params = pipeline::init_indexers(&t, &cfg)?;
    let init = pipeline::indexer_eval(&params, &eval_b)?;
    let stage = cfg.training.indexer;
    let mut w = MetricsWriter::create(&args.out.join("indexer_loss.jsonl"))?;
    for step in 0..stage.steps() {
        let losses = pipeline::indexer_train_step(&mut params, &train_b, &stage, step)?;
        let mut rec = MetricsRecord::new(&cfg, "indexer_loss")
            .value("loss", mean(&losses))
            .value("lr", stage.schedule.to_core().lr(step));
        rec.step = Some(step);
        for (l, v) in losses.iter().enumerate() {
            rec.values.insert(format!("loss_layer{l}"), *v);
        }
        w.append(&rec)?;
    }
    w.finish()?;
    timing.mark("train");

    let trained = pipeline::indexer_eval(&params, &eval_b)?;
    let mut ckpt = WeightsContainer::default();
    ckpt.put_indexers(&params);
    ckpt.save(&args.out.join(INDEXER_CHECKPOINT))?;
    write_json(&args.out.join("indexer_summary.json"), &LayerLosses { init, trained })?;
    timing.mark("done");
    timing.write()
}

pub fn train_memory(args: &RunArgs) -> Result<()> {
    let cfg = args.load()?;
    let ckpt = args
        .checkpoint()?
        .ok_or_else(|| HarnessError::Config("train-memory needs --checkpoint with a trained indexer".into()))?;
    let mut timing = Timing::new(&args.out, "train-memory");
    let t = pipeline::teacher(&cfg)?;
    let mut indexers = ckpt.indexers(t.n_layers(), cfg.indexer_config())?;
    let train = pipeline::samples(&t, &cfg, pipeline::STREAM_TRAIN, cfg.data.n_train)?;
    let eval = pipeline::samples(&t, &cfg, pipeline::STREAM_EVAL, cfg.data.n_eval)?;
    let setup = EvictionSetup {
        policy: PolicyId::Indexer,
        ..cfg.eviction_setup(PolicySection::Indexer)
    };
    let train_eps = pipeline::memory_episodes(&t, &setup, Some(&indexers), &train)?;
    let eval_eps = pipeline::memory_episodes(&t, &setup, Some(&indexers), &eval)?;
    let train_b = if args.freeze_indexer {
        Vec::new()
    } else {
        pipeline::distill_batches(&t, &cfg, &train)?
    };
    timing.mark("data");

    let mut slow = pipeline::init_memories(&t, &cfg);
    let init = pipeline::memory_eval(&cfg, &slow, &eval_eps)?;
    let stage = cfg.training.memory;
    let mut w = MetricsWriter::create(&args.out.join("memory_loss.jsonl"))?;
    for step in 0..stage.steps() {
        let losses = pipeline::memory_train_step(&mut slow, &cfg, &train_eps, step)?;
        let mut rec = MetricsRecord::new(&cfg, "memory_loss")
            .value("loss", mean(&losses))
            .value("lr", stage.schedule.to_core().lr(step));
        rec.step = Some(step);
        if !args.freeze_indexer {
            let il = pipeline::indexer_train_step(&mut indexers, &train_b, &stage, step)?;
            rec.values.insert("indexer_loss".into(), mean(&il));
        }
        w.append(&rec)?;
    }
    w.finish()?;
    timing.mark("train");

    let trained = pipeline::memory_eval(&cfg, &slow, &eval_eps)?;
    let mut out = WeightsContainer::default();
    out.put_indexers(&indexers);
    out.put_memories(&slow);
    out.save(&args.out.join(MODEL_CHECKPOINT))?;
    write_json(&args.out.join("memory_summary.json"), &LayerLosses { init, trained })?;
    timing.mark("done");
    timing.write()
}

struct Model {
    indexers: Option<Vec<IndexerParams>>,
    memories: Option<Vec<MemorySlowWeights>>,
}

fn load_model(args: &RunArgs, cfg: &ExperimentConfig, t: &TeacherModel, policies: &[PolicySection], use_memory: bool) -> Result<Model> {
    let ckpt = args.checkpoint()?;
    let needs_indexer = policies.contains(&PolicySection::Indexer);
    let indexers = match &ckpt {
        Some(c) if c.contains("idx.0.u_q") => Some(c.indexers(t.n_layers(), cfg.indexer_config())?),
        _ if needs_indexer => {
            return Err(HarnessError::Config("the indexer policy needs --checkpoint with indexer tensors".into()))
        }
        _ => None,
    };
    let memories = match &ckpt {
        Some(c) if use_memory && c.has_memories() => Some(c.memories(t.n_layers())?),
        _ => None,
    };
    Ok(Model { indexers, memories })
}

pub fn sweep(args: &RunArgs) -> Result<()> {
    let cfg = args.load()?;
    let mut timing = Timing::new(&args.out, "sweep");
    let t = pipeline::teacher(&cfg)?;
    let model = load_model(args, &cfg, &t, &cfg.sweep.policies, cfg.sweep.use_memory)?;
    let eval = pipeline::samples(&t, &cfg, pipeline::STREAM_EVAL, cfg.data.n_eval)?;
    timing.mark("data");

    let points: Vec<(PolicySection, f64)> = cfg
        .sweep
        .policies
        .iter()
        .flat_map(|&p| cfg.sweep.ratios.iter().map(move |&r| (p, r)))
        .collect();
    let results: Vec<Vec<SampleMetrics>> = points
        .par_iter()
        .map(|&(policy, ratio)| {
            let mut setup = cfg.eviction_setup(policy);
            setup.plan = CompressionPlan {
                ratio,
                budget: setup.plan.budget.max(cfg.data.prompt_len),
                ..setup.plan
            };
            eval.iter()
                .map(|s| {
                    pipeline::evaluate_sample(
                        &t,
                        &setup,
                        model.indexers.as_deref(),
                        model.memories.as_deref(),
                        &cfg,
                        s,
                    )
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    timing.mark("evaluate");

    let mut w = MetricsWriter::create(&args.out.join("sweep.jsonl"))?;
    for ((policy, ratio), ms) in points.iter().zip(&results) {
        let col = |f: fn(&SampleMetrics) -> f64| ms.iter().map(f).collect::<Vec<f64>>();
        let (attn, fused) = (col(|m| m.mse_attn), col(|m| m.mse_fused));
        let wins = attn.iter().zip(&fused).filter(|(a, f)| f < a).count();
        let mut rec = MetricsRecord::new(&cfg, "sweep")
            .value("mse_attn", mean(&attn))
            .value("mse_fused", mean(&fused))
            .value("fused_win_rate", wins as f64 / ms.len() as f64)
            .value("recall", mean(&col(|m| m.recall)))
            .value("policy_kl", mean(&col(|m| m.policy_kl)))
            .series("mse_attn", attn)
            .series("mse_fused", fused)
            .series("recall", col(|m| m.recall))
            .series("policy_kl", col(|m| m.policy_kl));
        rec.policy = Some(policy_label(*policy));
        rec.ratio = Some(*ratio);
        rec.accounting = Some(ms[0].accounting.into());
        w.append(&rec)?;
    }
    w.finish()?;
    timing.mark("done");
    timing.write()
}

/// Hidden states of an uncompressed decode: inputs fed at every step and
/// the outputs they produced.
struct Trajectory {
    prompt: Matrix,
    inputs: Vec<Vec<f64>>,
    outputs: Vec<Vec<f64>>,
}

fn reference_trajectory(t: &TeacherModel, cfg: &ExperimentConfig) -> Result<Trajectory> {
    let d = t.config().d_model;
    let mut rng = Rng::new(cfg.seed).split(pipeline::STREAM_DECODE);
    let prompt = Matrix::random_normal(cfg.decode.prompt_len, d, 1.0, &mut rng);
    let mut full = Engine::uncompressed(t);
    let out = full.prefill(&prompt)?;
    let mut last = out.row(out.rows() - 1).to_vec();
    let radius = (d as f64).sqrt();
    let mut inputs = Vec::with_capacity(cfg.decode.steps);
    let mut outputs = Vec::with_capacity(cfg.decode.steps);
    for _ in 0..cfg.decode.steps {
        let n = kvgate_core::math::norm2(&last).max(1e-300);
        let x: Vec<f64> = last
            .iter()
            .map(|v| radius * v / n + cfg.decode.noise * rng.normal())
            .collect();
        last = full.step(&x)?;
        inputs.push(x);
        outputs.push(last.clone());
    }
    Ok(Trajectory { prompt, inputs, outputs })
}

pub fn decode_sim(args: &RunArgs) -> Result<()> {
    let cfg = args.load()?;
    let mut timing = Timing::new(&args.out, "decode-sim");
    let t = pipeline::teacher(&cfg)?;
    let model = load_model(args, &cfg, &t, &[cfg.policy], cfg.decode.use_memory)?;
    let traj = reference_trajectory(&t, &cfg)?;
    timing.mark("reference");

    let total_len = cfg.decode.prompt_len + cfg.decode.steps;
    let runs: Vec<MetricsRecord> = cfg
        .decode
        .budgets
        .par_iter()
        .map(|&budget| {
            let mut setup = cfg.eviction_setup(cfg.policy);
            setup.plan = CompressionPlan {
                ratio: 0.0,
                budget,
                ..setup.plan
            };
            let interval = setup.plan.interval;
            let memory = model.memories.clone().map(|m| (cfg.memory_config(), m));
            let mut eng = Engine::new(&t, setup, model.indexers.as_deref(), memory)?;
            eng.prefill(&traj.prompt)?;
            let mut rows = Vec::with_capacity(traj.inputs.len());
            let mut errs = Vec::with_capacity(traj.inputs.len());
            let mut evicted = Vec::with_capacity(traj.inputs.len());
            let mut identical = true;
            let mut violations = 0usize;
            for (x, y_full) in traj.inputs.iter().zip(&traj.outputs) {
                let y = eng.step(x)?;
                identical &= &y == y_full;
                let kept = eng.max_rows();
                if kept > budget + interval {
                    violations += 1;
                }
                rows.push(kept as f64);
                errs.push(sq_dist(&y, y_full));
                evicted.push(eng.evicted_total() as f64);
            }
            let mut rec = MetricsRecord::new(&cfg, "decode")
                .value("max_rows", rows.iter().cloned().fold(0.0, f64::max))
                .value("bound_violations", violations as f64)
                .value("mean_err", mean(&errs))
                .value("final_evicted", evicted.last().copied().unwrap_or(0.0))
                .value("identical_to_full", if identical { 1.0 } else { 0.0 })
                .value("budget_covers_run", if budget >= total_len { 1.0 } else { 0.0 })
                .series("rows", rows)
                .series("err", errs)
                .series("evicted", evicted);
            rec.policy = Some(policy_label(cfg.policy));
            rec.budget = Some(budget);
            rec.accounting = Some(eng.accounting().into());
            Ok(rec)
        })
        .collect::<Result<_>>()?;
    timing.mark("simulate");

    let mut w = MetricsWriter::create(&args.out.join("decode.jsonl"))?;
    for r in &runs {
        w.append(r)?;
    }
    w.finish()?;
    timing.mark("done");
    timing.write()
}

#[derive(Serialize)]
struct ReportSummary {
    schema_version: u32,
    records: usize,
    config_hashes: Vec<String>,
    /// kind -> policy -> metric -> mean over points.
    aggregates: BTreeMap<String, BTreeMap<String, BTreeMap<String, f64>>>,
}

fn csv_name(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '_' { c } else { '-' }).collect()
}

/// Writes one CSV per (kind, metric, policy) plus `summary.json`.
pub fn report(inputs: &[PathBuf], out: &Path) -> Result<()> {
    if inputs.is_empty() {
        return Err(HarnessError::Config("report needs at least one metrics file".into()));
    }
    let mut records = Vec::new();
    for p in inputs {
        records.extend(read_records(p)?);
    }
    if records.is_empty() {
        return Err(HarnessError::Format("no metrics records to report".into()));
    }
    std::fs::create_dir_all(out).map_err(|e| HarnessError::io(out, e))?;

    // (kind, policy, metric) -> [(x, value)]
    let mut curves: BTreeMap<(String, String, String), Vec<(f64, f64)>> = BTreeMap::new();
    for r in &records {
        let (axis, x) = match (r.ratio, r.budget, r.step) {
            (Some(v), _, _) => ("ratio", v),
            (None, Some(b), _) => ("budget", b as f64),
            (None, None, Some(s)) => ("step", s as f64),
            _ => continue,
        };
        let policy = r.policy.clone().unwrap_or_else(|| "all".into());
        let mut values: Vec<(String, f64)> = r.values.iter().map(|(k, v)| (k.clone(), *v)).collect();
        if let Some(a) = r.accounting {
            values.push(("kv_bytes".into(), a.kv_bytes as f64));
            values.push(("index_key_bytes".into(), a.index_key_bytes as f64));
            values.push(("memory_bytes".into(), a.memory_bytes as f64));
            values.push(("total_bytes".into(), a.total_bytes as f64));
        }
        for (k, v) in values {
            curves
                .entry((format!("{}:{axis}", r.kind), policy.clone(), k))
                .or_default()
                .push((x, v));
        }
    }

    let mut aggregates: BTreeMap<String, BTreeMap<String, BTreeMap<String, f64>>> = BTreeMap::new();
    for ((kind_axis, policy, metric), mut pts) in curves {
        let (kind, axis) = kind_axis.split_once(':').expect("kind and axis");
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut text = format!("{axis},{metric}\n");
        for (x, v) in &pts {
            text.push_str(&format!("{x},{v}\n"));
        }
        let path = out.join(format!("{}_{}_{}.csv", csv_name(kind), csv_name(&metric), csv_name(&policy)));
        std::fs::write(&path, text).map_err(|e| HarnessError::io(&path, e))?;
        let m = pts.iter().map(|p| p.1).sum::<f64>() / pts.len() as f64;
        aggregates
            .entry(kind.to_string())
            .or_default()
            .entry(policy)
            .or_default()
            .insert(metric, m);
    }
    let mut hashes: Vec<String> = records.iter().map(|r| r.config_hash.clone()).collect();
    hashes.sort();
    hashes.dedup();
    write_json(
        &out.join("summary.json"),
        &ReportSummary {
            schema_version: SCHEMA_VERSION,
            records: records.len(),
            config_hashes: hashes,
            aggregates,
        },
    )
}

/// One named self-check outcome.
#[derive(Debug, Clone)]
pub struct Check {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

fn check(name: &'static str, run: impl FnOnce() -> Result<(bool, String)>) -> Check {
    match run() {
        Ok((pass, detail)) => Check { name, pass, detail },
        Err(e) => Check { name, pass: false, detail: e.to_string() },
    }
}

/// Fast invariant checks on a small teacher.
pub fn selftest() -> Vec<Check> {
    use kvgate_core::teacher::TeacherConfig;
    let t = match TeacherModel::new(TeacherConfig { n_layers: 2, seed: 11, ..TeacherConfig::default() }) {
        Ok(t) => t,
        Err(e) => {
            return vec![Check { name: "teacher", pass: false, detail: e.to_string() }];
        }
    };
    let d = t.config().d_model;
    let mut rng = Rng::new(17);
    let x = Matrix::random_normal(96, d, 1.0, &mut rng);
    let mut checks = Vec::new();

    checks.push(check("decode_matches_forward", || {
        let traces = t.forward(&x)?;
        let last = &traces[t.n_layers() - 1].out;
        let mut e = Engine::uncompressed(&t);
        e.prefill(&x.gather_rows(&(0..32).collect::<Vec<_>>()))?;
        let mut worst = 0.0f64;
        for i in 32..x.rows() {
            let y = e.step(x.row(i))?;
            worst = y.iter().zip(last.row(i)).fold(worst, |m, (a, b)| m.max((a - b).abs()));
        }
        Ok((worst < 1e-9, format!("max abs diff {worst:.2e}")))
    }));

    checks.push(check("budget_and_sinks", || {
        let setup = EvictionSetup {
            plan: CompressionPlan { ratio: 0.0, interval: 8, budget: 24, sinks: 2, local_window: 4 },
            policy: PolicyId::Knorm,
            ..EvictionSetup::default()
        };
        let mut e = Engine::new(&t, setup, None, None)?;
        e.prefill(&x.gather_rows(&(0..16).collect::<Vec<_>>()))?;
        let mut ok = true;
        for i in 16..x.rows() {
            e.step(x.row(i))?;
            ok &= e.max_rows() <= 24 + 8;
            for l in 0..t.n_layers() {
                ok &= e.cache().layer(l).positions()[..2] == [0, 1];
            }
        }
        Ok((ok, format!("final rows {}", e.max_rows())))
    }));

    checks.push(check("checkpoint_round_trip", || {
        let mut w = WeightsContainer::default();
        w.insert_matrix("m", &x);
        let bytes = w.to_bytes();
        let same = WeightsContainer::from_bytes(&bytes)?.to_bytes() == bytes;
        Ok((same, format!("{} bytes", bytes.len())))
    }));

    checks.push(check("streaming_kl_blocks", || {
        use kvgate_core::indexer::{streaming_distill_loss, DistillBatch, IndexerConfig};
        let traces = t.forward(&x)?;
        let tr = &traces[0];
        let p = IndexerParams::init(IndexerConfig { n_heads: 2, d_index: 4 }, t.layout().q_width(), d, &mut rng)?;
        let rows: Vec<usize> = (0..x.rows()).collect();
        let b = DistillBatch::new(
            tr.x.clone(),
            tr.q_pre.clone(),
            tr.q.clone(),
            tr.k.clone(),
            t.layout(),
            t.config().attn_scale(),
            2,
            rows,
        )?;
        let full = streaming_distill_loss(&p, &b, b.len(), b.len())?.loss;
        let small = streaming_distill_loss(&p, &b, 3, 8)?.loss;
        let diff = (full - small).abs();
        Ok((diff < 1e-12, format!("diff {diff:.2e}")))
    }));
    checks
}
