//! Experiment harness for targeted dropout and magnitude pruning: CIFAR-10
//! binary IO, `TDCK` checkpoints, JSON experiment configs, training and
//! pruning sweeps, second-order analysis outputs and the `sparsekit` CLI.

pub mod checkpoint;
pub mod cifar;
pub mod cli;
pub mod config;
pub mod error;
pub mod harness;
pub mod report;

pub use config::ExperimentConfig;
pub use error::{Error, Result};
pub use sparsekit_core as core;
