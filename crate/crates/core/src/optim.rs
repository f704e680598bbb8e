//! Learning-rate schedule and gradient clipping for plain SGD.

use crate::error::{invalid, Result};

/// Warmup-stable-decay schedule: linear ramp from 0 to `peak`, a plateau,
/// then linear decay to `final_lr`; `final_lr` afterwards.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WsdSchedule {
    pub warmup: usize,
    pub stable: usize,
    pub decay: usize,
    pub peak: f64,
    pub final_lr: f64,
}

impl Default for WsdSchedule {
    fn default() -> Self {
        Self {
            warmup: 100,
            stable: 2000,
            decay: 2000,
            peak: 1e-3,
            final_lr: 7.5e-6,
        }
    }
}

impl WsdSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.peak > 0.0 && self.final_lr >= 0.0 && self.final_lr <= self.peak) {
            return invalid("learning rates must satisfy 0 <= final <= peak, peak > 0");
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.warmup + self.stable + self.decay
    }

    /// Learning rate of 0-based `step`.
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.peak * (step + 1) as f64 / self.warmup as f64;
        }
        let s = step - self.warmup;
        if s < self.stable {
            return self.peak;
        }
        let s = s - self.stable;
        if s + 1 < self.decay {
            let frac = (s + 1) as f64 / self.decay as f64;
            return self.peak + (self.final_lr - self.peak) * frac;
        }
        self.final_lr
    }
}

/// Rescales the gradient slices in place so their joint L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_by_norm(grads: &mut [&mut [f64]], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        let s = WsdSchedule::default();
        assert_eq!(s.peak, 1e-3);
        assert_eq!(s.final_lr, 7.5e-6);
        assert!((s.lr(0) - 1e-5).abs() < 1e-18);
        assert_eq!(s.lr(99), 1e-3);
        assert_eq!(s.lr(100), 1e-3);
        assert_eq!(s.lr(2099), 1e-3);
        assert!(s.lr(2100) < 1e-3);
        assert_eq!(s.lr(4099), 7.5e-6);
        assert_eq!(s.lr(10_000), 7.5e-6);
        assert_eq!(s.total_steps(), 4100);
    }

    #[test]
    fn decay_is_monotone() {
        let s = WsdSchedule { warmup: 3, stable: 2, decay: 5, peak: 1.0, final_lr: 0.1 };
        let lrs: Vec<f64> = (0..12).map(|i| s.lr(i)).collect();
        assert!(lrs[..3].windows(2).all(|w| w[0] < w[1]));
        assert!(lrs[5..10].windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn clipping() {
        let mut a = vec![3.0];
        let mut b = vec![4.0];
        let n = clip_by_norm(&mut [&mut a, &mut b], 1.0);
        assert_eq!(n, 5.0);
        assert!((a[0] - 0.6).abs() < 1e-15 && (b[0] - 0.8).abs() < 1e-15);
        let mut c = vec![0.1];
        clip_by_norm(&mut [&mut c], 1.0);
        assert_eq!(c[0], 0.1);
    }
}
