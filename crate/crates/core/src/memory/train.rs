use super::{gate, mem_read, mem_write, MemoryConfig, MemorySlowWeights, MemoryState};
use crate::error::{invalid, Error, Result};
use crate::indexer::TrainLog;
use crate::math::{axpy, dot, Matrix};
use crate::optim::{clip_by_norm, WsdSchedule};

/// One step of a memory's life: absorb evicted rows, or answer a query
/// whose target is the residual the attention output is missing.
#[derive(Debug, Clone, PartialEq)]
pub enum MemoryEvent {
    Write(Vec<(Vec<f64>, Vec<f64>)>),
    Read { q: Vec<f64>, residual: Vec<f64> },
}

/// Events of one layer over one sequence, starting from an empty memory.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MemoryEpisode {
    pub events: Vec<MemoryEvent>,
}

impl MemoryEpisode {
    pub fn n_reads(&self) -> usize {
        self.events.iter().filter(|e| matches!(e, MemoryEvent::Read { .. })).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryGrads {
    pub w_phi: Matrix,
    pub b_phi: Vec<f64>,
    pub w_g: Vec<f64>,
    pub bias: f64,
}

impl MemoryGrads {
    fn zeros_like(s: &MemorySlowWeights) -> Self {
        Self {
            w_phi: Matrix::zeros(s.w_phi.rows(), s.w_phi.cols()),
            b_phi: vec![0.0; s.b_phi.len()],
            w_g: vec![0.0; s.w_g.len()],
            bias: 0.0,
        }
    }

    fn add(&mut self, other: &MemoryGrads) {
        self.w_phi.add_scaled(1.0, &other.w_phi);
        axpy(&mut self.b_phi, 1.0, &other.b_phi);
        axpy(&mut self.w_g, 1.0, &other.w_g);
        self.bias += other.bias;
    }

    fn scale(&mut self, s: f64) {
        self.w_phi.scale(s);
        self.b_phi.iter_mut().for_each(|v| *v *= s);
        self.w_g.iter_mut().for_each(|v| *v *= s);
        self.bias *= s;
    }
}

/// Mean over reads of `|residual - g(q) m(q)|^2`.
pub fn episode_loss(slow: &MemorySlowWeights, cfg: &MemoryConfig, ep: &MemoryEpisode) -> Result<f64> {
    let n = ep.n_reads();
    if n == 0 {
        return Ok(0.0);
    }
    let mut st = MemoryState::zeros(slow.d_mem(), slow.d_model());
    let mut total = 0.0;
    for e in &ep.events {
        match e {
            MemoryEvent::Write(rows) => mem_write(slow, &mut st, rows, cfg.lambda, cfg.eta)?,
            MemoryEvent::Read { q, residual } => {
                let m = mem_read(slow, &st, q, cfg.eps);
                let g = gate(slow, q);
                total += residual.iter().zip(&m).map(|(r, x)| (r - g * x).powi(2)).sum::<f64>();
            }
        }
    }
    Ok(total / n as f64)
}

struct ReadTape {
    f: Vec<f64>,
    m: Vec<f64>,
    den: f64,
    g: f64,
    mem: Matrix,
    b: Vec<f64>,
}

/// Episode loss and its exact gradient, replaying the writes backwards so
/// the feature map is differentiated through every stored row.
pub fn memory_gradients(
    slow: &MemorySlowWeights,
    cfg: &MemoryConfig,
    ep: &MemoryEpisode,
) -> Result<(f64, MemoryGrads)> {
    let mut grads = MemoryGrads::zeros_like(slow);
    let n = ep.n_reads();
    if n == 0 {
        return Ok((0.0, grads));
    }
    let inv_n = 1.0 / n as f64;
    let mut st = MemoryState::zeros(slow.d_mem(), slow.d_model());
    let mut tapes = Vec::with_capacity(n);
    let mut loss = 0.0;
    for e in &ep.events {
        match e {
            MemoryEvent::Write(rows) => mem_write(slow, &mut st, rows, cfg.lambda, cfg.eta)?,
            MemoryEvent::Read { q, residual } => {
                let f = slow.features(q);
                let den = f.iter().zip(&st.b).map(|(x, b)| x * x * b).sum::<f64>() + cfg.eps;
                let mut m = st.m.apply_transpose(&f);
                m.iter_mut().for_each(|v| *v /= den);
                let g = gate(slow, q);
                loss += residual.iter().zip(&m).map(|(r, x)| (r - g * x).powi(2)).sum::<f64>();
                tapes.push(ReadTape { f, m, den, g, mem: st.m.clone(), b: st.b.clone() });
            }
        }
    }
    loss *= inv_n;

    let (dm_rows, dm_cols) = (slow.d_mem(), slow.d_model());
    let mut adj_m = Matrix::zeros(dm_rows, dm_cols);
    let mut adj_b = vec![0.0; dm_rows];
    let mut tape = tapes.iter().rev();
    for e in ep.events.iter().rev() {
        match e {
            MemoryEvent::Read { q, residual } => {
                let t = tape.next().ok_or_else(|| Error::InvalidArgument("tape underflow".into()))?;
                let err: Vec<f64> = residual.iter().zip(&t.m).map(|(r, x)| r - t.g * x).collect();
                let d_m: Vec<f64> = err.iter().map(|e| -2.0 * t.g * e * inv_n).collect();
                let d_g = -2.0 * dot(&err, &t.m) * inv_n;
                let dz = d_g * t.g * (1.0 - t.g);
                axpy(&mut grads.w_g, dz, q);
                grads.bias += dz;

                let u: Vec<f64> = d_m.iter().map(|v| v / t.den).collect();
                let s = -dot(&d_m, &t.m) / t.den;
                let mut df = t.mem.apply(&u);
                for ((d, f), b) in df.iter_mut().zip(&t.f).zip(&t.b) {
                    *d += 2.0 * f * b * s;
                }
                grads.w_phi.add_outer(1.0, &df, q);
                axpy(&mut grads.b_phi, 1.0, &df);
                if !cfg.stop_gradient {
                    adj_m.add_outer(1.0, &t.f, &u);
                    for (a, f) in adj_b.iter_mut().zip(&t.f) {
                        *a += f * f * s;
                    }
                }
            }
            MemoryEvent::Write(rows) => {
                if cfg.stop_gradient {
                    continue;
                }
                for (k, v) in rows {
                    let f = slow.features(k);
                    let mut dphi = adj_m.apply(v);
                    for ((d, a), x) in dphi.iter_mut().zip(&adj_b).zip(&f) {
                        *d = cfg.eta * (*d + 2.0 * a * x);
                    }
                    grads.w_phi.add_outer(1.0, &dphi, k);
                    axpy(&mut grads.b_phi, 1.0, &dphi);
                }
                if cfg.lambda != 1.0 {
                    adj_m.scale(cfg.lambda);
                    adj_b.iter_mut().for_each(|a| *a *= cfg.lambda);
                }
            }
        }
    }
    Ok((loss, grads))
}

/// One clipped SGD step on the mean loss over `episodes`.
pub fn memory_step(
    slow: &mut MemorySlowWeights,
    cfg: &MemoryConfig,
    episodes: &[MemoryEpisode],
    lr: f64,
    clip: f64,
) -> Result<f64> {
    if episodes.is_empty() {
        return invalid("memory step needs at least one episode");
    }
    let mut total = MemoryGrads::zeros_like(slow);
    let mut loss = 0.0;
    for ep in episodes {
        let (l, g) = memory_gradients(slow, cfg, ep)?;
        loss += l;
        total.add(&g);
    }
    let inv = 1.0 / episodes.len() as f64;
    total.scale(inv);
    let mut bias = [total.bias];
    clip_by_norm(
        &mut [total.w_phi.as_mut_slice(), &mut total.b_phi, &mut total.w_g, &mut bias],
        clip,
    );
    slow.w_phi.add_scaled(-lr, &total.w_phi);
    axpy(&mut slow.b_phi, -lr, &total.b_phi);
    axpy(&mut slow.w_g, -lr, &total.w_g);
    slow.bias -= lr * bias[0];
    Ok(loss * inv)
}

/// SGD over round-robin minibatches of `batch` episodes.
pub fn train_memory(
    slow: &mut MemorySlowWeights,
    cfg: &MemoryConfig,
    episodes: &[MemoryEpisode],
    schedule: &WsdSchedule,
    steps: usize,
    batch: usize,
    clip: f64,
) -> Result<TrainLog> {
    cfg.validate()?;
    schedule.validate()?;
    if steps > 0 && (episodes.is_empty() || batch == 0) {
        return invalid("training needs episodes and a positive batch size");
    }
    let mut log = TrainLog::default();
    for step in 0..steps {
        let start = (step * batch) % episodes.len();
        let chunk: Vec<MemoryEpisode> =
            (0..batch.min(episodes.len())).map(|i| episodes[(start + i) % episodes.len()].clone()).collect();
        let loss = memory_step(slow, cfg, &chunk, schedule.lr(step), clip)?;
        if !loss.is_finite() || !slow.is_finite() {
            return Err(Error::Divergence(step));
        }
        log.losses.push(loss);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::Rng;

    fn random_episode(rng: &mut Rng, d: usize, writes: usize, reads: usize) -> MemoryEpisode {
        let mut events = Vec::new();
        for w in 0..writes {
            let rows = (0..3).map(|_| (rng.normal_vec(d), rng.normal_vec(d))).collect();
            events.push(MemoryEvent::Write(rows));
            for _ in 0..reads {
                events.push(MemoryEvent::Read { q: rng.normal_vec(d), residual: rng.normal_vec(d) });
            }
            if w == 0 {
                events.push(MemoryEvent::Write(Vec::new()));
            }
        }
        MemoryEpisode { events }
    }

    fn slow(rng: &mut Rng, d_mem: usize, d: usize) -> MemorySlowWeights {
        let mut s = MemorySlowWeights::init(d_mem, d, rng);
        s.b_phi = rng.normal_vec(d_mem).iter().map(|v| 0.3 * v).collect();
        s.w_g = rng.normal_vec(d).iter().map(|v| 0.3 * v).collect();
        s.bias = 0.2;
        s
    }

    fn fd_check(stop_gradient: bool, seed: u64) {
        let mut rng = Rng::new(seed);
        let d = 6;
        let s = slow(&mut rng, 3, d);
        let cfg = MemoryConfig { d_mem: 3, lambda: 0.9, eta: 0.8, eps: 1e-6, stop_gradient, ..MemoryConfig::for_model(d) };
        let ep = random_episode(&mut rng, d, 3, 2);
        let (_, g) = memory_gradients(&s, &cfg, &ep).unwrap();
        let h = 1e-5;
        let loss = |s: &MemorySlowWeights| {
            if !stop_gradient {
                return episode_loss(s, &cfg, &ep).unwrap();
            }
            frozen_loss(s, &cfg, &ep, &slow_ref(seed))
        };
        for i in 0..d * 3 {
            let mut p = s.clone();
            p.w_phi.as_mut_slice()[i] += h;
            let mut m = s.clone();
            m.w_phi.as_mut_slice()[i] -= h;
            let fd = (loss(&p) - loss(&m)) / (2.0 * h);
            let an = g.w_phi.as_slice()[i];
            assert!((fd - an).abs() / fd.abs().max(an.abs()).max(1e-8) < 1e-4, "w_phi {i}: {fd} vs {an}");
        }
        for i in 0..3 {
            let mut p = s.clone();
            p.b_phi[i] += h;
            let mut m = s.clone();
            m.b_phi[i] -= h;
            let fd = (loss(&p) - loss(&m)) / (2.0 * h);
            assert!((fd - g.b_phi[i]).abs() / fd.abs().max(1e-8) < 1e-4);
        }
        for i in 0..d {
            let mut p = s.clone();
            p.w_g[i] += h;
            let mut m = s.clone();
            m.w_g[i] -= h;
            let fd = (loss(&p) - loss(&m)) / (2.0 * h);
            assert!((fd - g.w_g[i]).abs() / fd.abs().max(1e-8) < 1e-4);
        }
        let mut p = s.clone();
        p.bias += h;
        let mut m = s.clone();
        m.bias -= h;
        let fd = (loss(&p) - loss(&m)) / (2.0 * h);
        assert!((fd - g.bias).abs() / fd.abs().max(1e-8) < 1e-4);
    }

    fn slow_ref(seed: u64) -> MemorySlowWeights {
        let mut rng = Rng::new(seed);
        slow(&mut rng, 3, 6)
    }

    /// Loss with fast weights built by `writer` but read through `s`.
    fn frozen_loss(s: &MemorySlowWeights, cfg: &MemoryConfig, ep: &MemoryEpisode, writer: &MemorySlowWeights) -> f64 {
        let mut st = MemoryState::zeros(3, 6);
        let mut total = 0.0;
        for e in &ep.events {
            match e {
                MemoryEvent::Write(rows) => mem_write(writer, &mut st, rows, cfg.lambda, cfg.eta).unwrap(),
                MemoryEvent::Read { q, residual } => {
                    let m = mem_read(s, &st, q, cfg.eps);
                    let g = gate(s, q);
                    total += residual.iter().zip(&m).map(|(r, x)| (r - g * x).powi(2)).sum::<f64>();
                }
            }
        }
        total / ep.n_reads() as f64
    }

    #[test]
    fn full_replay_gradient_matches_finite_differences() {
        fd_check(false, 11);
        fd_check(false, 12);
    }

    #[test]
    fn stop_gradient_matches_frozen_state() {
        fd_check(true, 13);
    }

    #[test]
    fn zero_residual_closes_gate() {
        let mut rng = Rng::new(14);
        let d = 8;
        let mut s = MemorySlowWeights::init(2, d, &mut rng);
        let cfg = MemoryConfig::for_model(d);
        let episodes: Vec<MemoryEpisode> = (0..4)
            .map(|_| {
                let rows = (0..4).map(|_| (rng.normal_vec(d), rng.normal_vec(d))).collect();
                let mut events = vec![MemoryEvent::Write(rows)];
                for _ in 0..4 {
                    events.push(MemoryEvent::Read { q: rng.normal_vec(d), residual: vec![0.0; d] });
                }
                MemoryEpisode { events }
            })
            .collect();
        let mean_gate = |s: &MemorySlowWeights| {
            let mut total = 0.0;
            for ep in &episodes {
                for e in &ep.events {
                    if let MemoryEvent::Read { q, .. } = e {
                        total += gate(s, q);
                    }
                }
            }
            total
        };
        let before = mean_gate(&s);
        let sched = WsdSchedule { warmup: 5, stable: 50, decay: 5, peak: 0.1, final_lr: 0.01 };
        let log = train_memory(&mut s, &cfg, &episodes, &sched, 60, 2, 1.0).unwrap();
        assert_eq!(log.losses.len(), 60);
        assert!(mean_gate(&s) < before);
    }

    #[test]
    fn empty_episode_has_zero_loss() {
        let s = MemorySlowWeights::init(2, 4, &mut Rng::new(1));
        let cfg = MemoryConfig::for_model(16);
        let (l, g) = memory_gradients(&s, &cfg, &MemoryEpisode::default()).unwrap();
        assert_eq!(l, 0.0);
        assert_eq!(g.w_phi.sum_squares(), 0.0);
    }
}
