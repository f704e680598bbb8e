//! Learned KV-cache eviction for transformer attention.
//!
//! The crate provides a frozen random-weight teacher stack, a per-layer KV
//! cache with sink-protected compaction, heuristic eviction policies, a
//! trainable importance indexer distilled from teacher attention, and a
//! fast-weight latent memory that compensates the attention output for
//! evicted tokens.

pub mod error;
pub mod math;
pub mod memory;

pub use error::{Error, Result};
pub mod attention;
pub mod cache;
pub mod crosslayer;
pub mod engine;
pub mod indexer;
pub mod optim;
pub mod policy;
pub mod teacher;
