//! Experiment harness: configs, checkpoints, metrics and the CLI commands.

pub mod commands;
pub mod config;
pub mod error;
pub mod metrics;
pub mod pipeline;
pub mod weights;
