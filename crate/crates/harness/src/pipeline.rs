//! Synthetic data, the two training stages, and per-point evaluation.

use kvgate_core::engine::{run_prompt, Accounting, EvictionSetup, PromptRun};
use kvgate_core::indexer::{distill_gradients, masked_kl, DistillBatch, IndexerGrads, IndexerParams};
use kvgate_core::optim::clip_by_norm;
use kvgate_core::math::{sq_dist, Rng};
use kvgate_core::memory::{episode_loss, memory_step, MemoryEpisode, MemoryEvent, MemorySlowWeights};
use kvgate_core::teacher::{planted_retrieval, sample_needles, LayerTrace, PlantedConfig, TeacherModel};
use rayon::prelude::*;

use crate::config::{ExperimentConfig, StageSection};
use crate::error::{HarnessError, Result};

/// Rng stream ids split off the experiment seed.
pub const STREAM_TRAIN: u64 = 1;
pub const STREAM_EVAL: u64 = 2;
pub const STREAM_INDEXER_INIT: u64 = 3;
pub const STREAM_MEMORY_INIT: u64 = 4;
pub const STREAM_DECODE: u64 = 5;

/// One synthetic sequence: a prompt followed by probe rows.
#[derive(Debug, Clone)]
pub struct Sample {
    pub traces: Vec<LayerTrace>,
    pub needles: Vec<usize>,
    pub prompt_len: usize,
}

pub fn teacher(cfg: &ExperimentConfig) -> Result<TeacherModel> {
    Ok(TeacherModel::new(cfg.teacher_config())?)
}

/// `count` planted-retrieval sequences from Rng stream `stream`.
pub fn samples(t: &TeacherModel, cfg: &ExperimentConfig, stream: u64, count: usize) -> Result<Vec<Sample>> {
    let base = Rng::new(cfg.seed).split(stream);
    let d = &cfg.data;
    let planted = PlantedConfig {
        query_tail: d.query_tail + d.n_probes,
        ..cfg.planted()
    };
    let hi = d.prompt_len - cfg.plan.local_window.max(d.query_tail);
    (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = base.split(i as u64);
            let needles = sample_needles(&mut rng, d.needles, cfg.plan.sinks, hi)?;
            let seq = planted_retrieval(t, &planted, &needles, d.prompt_len + d.n_probes, &mut rng)?;
            Ok(Sample {
                traces: t.forward(&seq.x0)?,
                needles: seq.needles,
                prompt_len: d.prompt_len,
            })
        })
        .collect()
}

pub fn init_indexers(t: &TeacherModel, cfg: &ExperimentConfig) -> Result<Vec<IndexerParams>> {
    let mut rng = Rng::new(cfg.seed).split(STREAM_INDEXER_INIT);
    let lay = t.layout();
    (0..t.n_layers())
        .map(|_| Ok(IndexerParams::init(cfg.indexer_config(), lay.q_width(), t.config().d_model, &mut rng)?))
        .collect()
}

pub fn init_memories(t: &TeacherModel, cfg: &ExperimentConfig) -> Vec<MemorySlowWeights> {
    let mut rng = Rng::new(cfg.seed).split(STREAM_MEMORY_INIT);
    let d_mem = cfg.memory_config().d_mem;
    (0..t.n_layers())
        .map(|_| MemorySlowWeights::init(d_mem, t.config().d_model, &mut rng))
        .collect()
}

/// Prompt-only distillation inputs, `[layer][sample]`.
pub fn distill_batches(t: &TeacherModel, cfg: &ExperimentConfig, data: &[Sample]) -> Result<Vec<Vec<DistillBatch>>> {
    let lay = t.layout();
    let scale = t.config().attn_scale();
    (0..t.n_layers())
        .map(|l| {
            data.par_iter()
                .map(|s| {
                    let tr = &s.traces[l];
                    let rows: Vec<usize> = (0..s.prompt_len).collect();
                    Ok(DistillBatch::new(
                        tr.x.gather_rows(&rows),
                        tr.q_pre.gather_rows(&rows),
                        tr.q.gather_rows(&rows),
                        tr.k.gather_rows(&rows),
                        lay,
                        scale,
                        cfg.plan.sinks,
                        rows,
                    )?)
                })
                .collect()
        })
        .collect()
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Batch of round-robin items for `step`.
fn batch_of<T>(items: &[T], step: usize, batch: usize) -> impl Iterator<Item = &T> {
    let n = items.len();
    let b = batch.min(n);
    (0..b).map(move |i| &items[(step * b + i) % n])
}

/// One clipped SGD step per layer on a round-robin minibatch. Returns the
/// per-layer mean loss before the update.
pub fn indexer_train_step(
    params: &mut [IndexerParams],
    batches: &[Vec<DistillBatch>],
    stage: &StageSection,
    step: usize,
) -> Result<Vec<f64>> {
    let lr = stage.schedule.to_core().lr(step);
    params
        .par_iter_mut()
        .zip(batches.par_iter())
        .map(|(p, bs)| {
            let chunk: Vec<&DistillBatch> = batch_of(bs, step, stage.batch).collect();
            let inv = 1.0 / chunk.len() as f64;
            let mut loss = 0.0;
            let mut total: Option<IndexerGrads> = None;
            for b in chunk {
                let (l, g) = distill_gradients(p, b)?;
                loss += l * inv;
                match total.as_mut() {
                    None => total = Some(g),
                    Some(t) => {
                        t.u_q.add_scaled(1.0, &g.u_q);
                        t.u_k.add_scaled(1.0, &g.u_k);
                        t.g.add_scaled(1.0, &g.g);
                    }
                }
            }
            let mut g = total.expect("non-empty batch");
            clip_by_norm(&mut [g.u_q.as_mut_slice(), g.u_k.as_mut_slice(), g.g.as_mut_slice()], stage.clip / inv);
            p.u_q.add_scaled(-lr * inv, &g.u_q);
            p.u_k.add_scaled(-lr * inv, &g.u_k);
            p.g.add_scaled(-lr * inv, &g.g);
            if !loss.is_finite() || !p.is_finite() {
                return Err(HarnessError::Divergence(step));
            }
            Ok(loss)
        })
        .collect()
}

/// Stage-one training; returns the mean-over-layers loss of every step.
pub fn train_indexers(
    params: &mut [IndexerParams],
    batches: &[Vec<DistillBatch>],
    stage: &StageSection,
) -> Result<Vec<Vec<f64>>> {
    (0..stage.steps()).map(|s| indexer_train_step(params, batches, stage, s)).collect()
}

/// Mean distillation loss per layer.
pub fn indexer_eval(params: &[IndexerParams], batches: &[Vec<DistillBatch>]) -> Result<Vec<f64>> {
    params
        .par_iter()
        .zip(batches.par_iter())
        .map(|(p, bs)| {
            let ls = bs
                .iter()
                .map(|b| Ok(kvgate_core::indexer::streaming_distill_loss(p, b, b.len(), b.len())?.loss))
                .collect::<Result<Vec<f64>>>()?;
            Ok(mean(ls))
        })
        .collect()
}

/// Memory episodes `[layer][sample]`: each sample's prompt is compressed
/// once, the evicted rows are written, then every probe reads with the
/// residual between full-cache and compressed-cache attention as target.
pub fn memory_episodes(
    t: &TeacherModel,
    setup: &EvictionSetup,
    indexers: Option<&[IndexerParams]>,
    data: &[Sample],
) -> Result<Vec<Vec<MemoryEpisode>>> {
    let runs: Vec<PromptRun> = data
        .par_iter()
        .map(|s| Ok(run_prompt(t, &s.traces, s.prompt_len, setup, indexers, None)?))
        .collect::<Result<_>>()?;
    Ok((0..t.n_layers())
        .map(|l| {
            runs.iter()
                .map(|r| {
                    let mut events = vec![MemoryEvent::Write(r.written[l].clone())];
                    for (probe, reference) in r.probes.iter().zip(&r.reference) {
                        let p = &probe[l];
                        events.push(MemoryEvent::Read {
                            q: p.q_pre.clone(),
                            residual: reference[l].iter().zip(&p.o_attn).map(|(a, b)| a - b).collect(),
                        });
                    }
                    MemoryEpisode { events }
                })
                .collect()
        })
        .collect())
}

pub fn memory_train_step(
    slow: &mut [MemorySlowWeights],
    cfg: &ExperimentConfig,
    episodes: &[Vec<MemoryEpisode>],
    step: usize,
) -> Result<Vec<f64>> {
    let stage = &cfg.training.memory;
    let mc = cfg.memory_config();
    let lr = stage.schedule.to_core().lr(step);
    slow.par_iter_mut()
        .zip(episodes.par_iter())
        .map(|(s, eps)| {
            let chunk: Vec<MemoryEpisode> = batch_of(eps, step, stage.batch).cloned().collect();
            let loss = memory_step(s, &mc, &chunk, lr, stage.clip)?;
            if !loss.is_finite() || !s.is_finite() {
                return Err(HarnessError::Divergence(step));
            }
            Ok(loss)
        })
        .collect()
}

/// Mean memory loss per layer.
pub fn memory_eval(cfg: &ExperimentConfig, slow: &[MemorySlowWeights], episodes: &[Vec<MemoryEpisode>]) -> Result<Vec<f64>> {
    let mc = cfg.memory_config();
    slow.par_iter()
        .zip(episodes.par_iter())
        .map(|(s, eps)| {
            let ls = eps.iter().map(|e| Ok(episode_loss(s, &mc, e)?)).collect::<Result<Vec<f64>>>()?;
            Ok(mean(ls))
        })
        .collect()
}

/// Measurements of one sample at one sweep point.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleMetrics {
    pub mse_attn: f64,
    pub mse_fused: f64,
    pub recall: f64,
    pub policy_kl: f64,
    pub accounting: Accounting,
}

/// Fraction of needles retained by layer 0.
pub fn needle_recall(kept: &[usize], needles: &[usize]) -> f64 {
    if needles.is_empty() {
        return 1.0;
    }
    needles.iter().filter(|n| kept.binary_search(n).is_ok()).count() as f64 / needles.len() as f64
}

pub fn evaluate_sample(
    t: &TeacherModel,
    setup: &EvictionSetup,
    indexers: Option<&[IndexerParams]>,
    memories: Option<&[MemorySlowWeights]>,
    cfg: &ExperimentConfig,
    s: &Sample,
) -> Result<SampleMetrics> {
    let memory = memories.map(|m| (cfg.memory_config(), m.to_vec()));
    let run = run_prompt(t, &s.traces, s.prompt_len, setup, indexers, memory)?;
    let mut attn = Vec::new();
    let mut fused = Vec::new();
    for (probe, reference) in run.probes.iter().zip(&run.reference) {
        for (p, r) in probe.iter().zip(reference) {
            attn.push(sq_dist(r, &p.o_attn));
            fused.push(sq_dist(r, &p.o_fused));
        }
    }
    let lay = t.layout();
    let scale = t.config().attn_scale();
    let q_set: Vec<usize> = (0..s.prompt_len).collect();
    let kls = (0..t.n_layers())
        .map(|l| {
            let mut teacher_imp = s.traces[l].pooled_importance(&q_set, lay, scale);
            teacher_imp.truncate(s.prompt_len);
            Ok(masked_kl(&teacher_imp, &run.scores[l], cfg.plan.sinks)?)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(SampleMetrics {
        mse_attn: mean(attn),
        mse_fused: mean(fused),
        recall: needle_recall(&run.kept[0], &s.needles),
        policy_kl: mean(kls),
        accounting: run.accounting,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recall_counts_kept_needles() {
        assert_eq!(needle_recall(&[0, 3, 5, 9], &[3, 4, 9, 11]), 0.5);
        assert_eq!(needle_recall(&[1], &[]), 1.0);
    }

    #[test]
    fn round_robin_batches_wrap() {
        let xs = [0, 1, 2, 3, 4];
        assert_eq!(batch_of(&xs, 0, 2).copied().collect::<Vec<_>>(), vec![0, 1]);
        assert_eq!(batch_of(&xs, 2, 2).copied().collect::<Vec<_>>(), vec![4, 0]);
        assert_eq!(batch_of(&xs, 1, 9).copied().collect::<Vec<_>>(), vec![0, 1, 2, 3, 4]);
    }
}
