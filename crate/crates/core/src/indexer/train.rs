use super::{relu, stream_max, DistillBatch, IndexerParams};
use crate::error::{invalid, Error, Result};
use crate::math::{dot, kl_divergence, rmsnorm_backward, softmax_stable, Matrix};
use crate::optim::{clip_by_norm, WsdSchedule};

#[derive(Debug, Clone, PartialEq)]
pub struct IndexerGrads {
    pub u_q: Matrix,
    pub u_k: Matrix,
    pub g: Matrix,
}

impl IndexerGrads {
    fn zeros_like(p: &IndexerParams) -> Self {
        Self {
            u_q: Matrix::zeros(p.u_q.rows(), p.u_q.cols()),
            u_k: Matrix::zeros(p.u_k.rows(), p.u_k.cols()),
            g: Matrix::zeros(p.g.rows(), p.g.cols()),
        }
    }

    pub fn norm(&self) -> f64 {
        (self.u_q.sum_squares() + self.u_k.sum_squares() + self.g.sum_squares()).sqrt()
    }
}

/// Loss and analytic gradients of the distillation KL. Each key's gradient
/// flows only through its lowest-index maximizing query.
pub fn distill_gradients(params: &IndexerParams, batch: &DistillBatch) -> Result<(f64, IndexerGrads)> {
    let n = batch.len();
    let feats = params.sequence_features(&batch.x, &batch.q_pre)?;
    let (student, arg) = stream_max(&batch.q_set, n, n.max(1), n.max(1), |s, t| {
        params.score(&feats.queries[s], feats.keys.row(t))
    })?;
    let support = batch.support();
    if support.is_empty() {
        return Err(Error::EmptySupport);
    }
    let t_log: Vec<f64> = support.iter().map(|&t| batch.teacher_imp()[t]).collect();
    let s_log: Vec<f64> = support.iter().map(|&t| student[t]).collect();
    let loss = kl_divergence(&t_log, &s_log)?;
    let p = softmax_stable(&t_log)?;
    let q = softmax_stable(&s_log)?;

    let cfg = params.config;
    let d = cfg.d_index;
    let gate_scale = cfg.gate_scale();
    let mut d_gate = Matrix::zeros(n, cfg.n_heads);
    let mut d_qhat = Matrix::zeros(n, cfg.n_heads * d);
    let mut d_khat = Matrix::zeros(n, d);
    for (j, &t) in support.iter().enumerate() {
        let c = q[j] - p[j];
        let s = arg[t];
        let qf = &feats.queries[s];
        let k = feats.keys.row(t);
        for h in 0..cfg.n_heads {
            let qh = &qf.q_hat[h * d..(h + 1) * d];
            let z = dot(qh, k);
            if z > 0.0 {
                d_gate.row_mut(s)[h] += c * relu(z);
                let dz = c * qf.gate[h];
                crate::math::axpy(&mut d_qhat.row_mut(s)[h * d..(h + 1) * d], dz, k);
                crate::math::axpy(d_khat.row_mut(t), dz, qh);
            }
        }
    }

    let mut grads = IndexerGrads::zeros_like(params);
    for s in 0..n {
        let dg = d_gate.row(s);
        if dg.iter().any(|v| *v != 0.0) {
            let scaled: Vec<f64> = dg.iter().map(|v| v * gate_scale).collect();
            grads.g.add_outer(1.0, &scaled, batch.x.row(s));
        }
        let dq = d_qhat.row(s);
        if dq.iter().any(|v| *v != 0.0) {
            let u = &feats.queries[s].u;
            let du: Vec<f64> = (0..cfg.n_heads)
                .flat_map(|h| rmsnorm_backward(&u[h * d..(h + 1) * d], &dq[h * d..(h + 1) * d]))
                .collect();
            grads.u_q.add_outer(1.0, &du, batch.q_pre.row(s));
        }
        let dk = d_khat.row(s);
        if dk.iter().any(|v| *v != 0.0) {
            let uk = params.u_k.apply(batch.x.row(s));
            grads.u_k.add_outer(1.0, &rmsnorm_backward(&uk, dk), batch.x.row(s));
        }
    }
    Ok((loss, grads))
}

/// One clipped SGD step; returns the loss before the update.
pub fn indexer_step(params: &mut IndexerParams, batch: &DistillBatch, lr: f64, clip: f64) -> Result<f64> {
    let (loss, mut g) = distill_gradients(params, batch)?;
    clip_by_norm(
        &mut [g.u_q.as_mut_slice(), g.u_k.as_mut_slice(), g.g.as_mut_slice()],
        clip,
    );
    params.u_q.add_scaled(-lr, &g.u_q);
    params.u_k.add_scaled(-lr, &g.u_k);
    params.g.add_scaled(-lr, &g.g);
    Ok(loss)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub losses: Vec<f64>,
}

/// Plain SGD over `batches` in round-robin order for `steps` steps.
pub fn train_indexer(
    params: &mut IndexerParams,
    batches: &[DistillBatch],
    schedule: &WsdSchedule,
    steps: usize,
    clip: f64,
) -> Result<TrainLog> {
    schedule.validate()?;
    if steps > 0 && batches.is_empty() {
        return invalid("training needs at least one batch");
    }
    let mut log = TrainLog::default();
    for step in 0..steps {
        let loss = indexer_step(params, &batches[step % batches.len()], schedule.lr(step), clip)?;
        if !loss.is_finite() || !params.is_finite() {
            return Err(Error::Divergence(step));
        }
        log.losses.push(loss);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::indexer::{masked_kl, IndexerConfig};
    use crate::math::Rng;
    use crate::teacher::{TeacherConfig, TeacherModel};

    fn setup(seed: u64) -> (IndexerParams, DistillBatch) {
        let t = TeacherModel::new(TeacherConfig { seed, ..TeacherConfig::default() }).unwrap();
        let x0 = Matrix::random_normal(24, 64, 1.0, &mut Rng::new(seed + 1));
        let tr = t.forward(&x0).unwrap();
        let p = IndexerParams::init(IndexerConfig { n_heads: 2, d_index: 4 }, 64, 64, &mut Rng::new(seed + 2)).unwrap();
        let b = DistillBatch::from_trace(&tr[0], t.layout(), t.config().attn_scale(), 4).unwrap();
        (p, b)
    }

    /// Dense loss straight from the definitions, for finite differences.
    fn loss_of(p: &IndexerParams, b: &DistillBatch) -> f64 {
        let n = b.len();
        let mut student = vec![f64::NEG_INFINITY; n];
        for &s in &b.q_set {
            let qf = p.query_features(b.x.row(s), b.q_pre.row(s));
            for (t, st) in student.iter_mut().enumerate().take(s + 1) {
                *st = st.max(p.score(&qf, &p.key_feature(b.x.row(t))));
            }
        }
        masked_kl(b.teacher_imp(), &student, b.sinks).unwrap()
    }

    fn check(param: fn(&mut IndexerParams) -> &mut Matrix, grad: fn(&IndexerGrads) -> &Matrix, seed: u64) {
        let (p, b) = setup(seed);
        let (_, g) = distill_gradients(&p, &b).unwrap();
        let mut rng = Rng::new(seed + 10);
        let mut pp = p.clone();
        let len = param(&mut pp).as_slice().len();
        for _ in 0..20 {
            let i = rng.below(len);
            let h = 1e-5;
            let mut plus = p.clone();
            param(&mut plus).as_mut_slice()[i] += h;
            let mut minus = p.clone();
            param(&mut minus).as_mut_slice()[i] -= h;
            let fd = (loss_of(&plus, &b) - loss_of(&minus, &b)) / (2.0 * h);
            let an = grad(&g).as_slice()[i];
            let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-7);
            assert!(err < 1e-4, "coord {i}: fd {fd} analytic {an}");
        }
    }

    #[test]
    fn gradient_u_q() {
        check(|p| &mut p.u_q, |g| &g.u_q, 1);
    }

    #[test]
    fn gradient_u_k() {
        check(|p| &mut p.u_k, |g| &g.u_k, 2);
    }

    #[test]
    fn gradient_gate() {
        check(|p| &mut p.g, |g| &g.g, 3);
    }

    #[test]
    fn zero_gate_blocks_query_gradient() {
        let (mut p, b) = setup(4);
        p.g = Matrix::zeros(p.g.rows(), p.g.cols());
        let (_, g) = distill_gradients(&p, &b).unwrap();
        assert_eq!(g.u_q.sum_squares(), 0.0);
        assert_eq!(g.u_k.sum_squares(), 0.0);
    }

    #[test]
    fn all_sink_support_is_rejected() {
        let (p, mut b) = setup(5);
        b.q_set = vec![2];
        b.teacher_imp = b.teacher_importance(4, 4).unwrap();
        assert!(distill_gradients(&p, &b).is_err());
    }

    #[test]
    fn zero_steps_leave_params_unchanged() {
        let (mut p, b) = setup(6);
        let before = p.clone();
        let log = train_indexer(&mut p, &[b], &WsdSchedule::default(), 0, 1.0).unwrap();
        assert!(log.losses.is_empty());
        assert_eq!(p, before);
    }

    #[test]
    fn training_reduces_loss() {
        let (mut p, b) = setup(7);
        let sched = WsdSchedule { warmup: 10, stable: 100, decay: 40, peak: 0.05, final_lr: 1e-4 };
        let log = train_indexer(&mut p, std::slice::from_ref(&b), &sched, 150, 1.0).unwrap();
        assert_eq!(log.losses.len(), 150);
        assert!(log.losses[149] < log.losses[0]);
    }
}
