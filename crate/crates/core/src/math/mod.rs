//! Numerical primitives shared by every module.

mod matrix;
mod ops;
mod rng;

pub use matrix::{axpy, dot, norm2, solve_spd, sq_dist, Matrix};
pub use ops::{
    kl_divergence, log_softmax, normalized_entropy, rmsnorm, rmsnorm_backward, score_to_prob,
    sigmoid, softmax_stable, topk_indices, ProbMode, DELTA, EPS_ENTROPY, EPS_NORM,
};
pub use rng::{mix64, Rng};
