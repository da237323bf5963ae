//! Experiment plumbing around `ddt-core`: configuration files, run
//! directories, the training/ablation drivers behind the `ddt` binary, and
//! plots.

pub mod ablate;
pub mod analysis;
pub mod config;
pub mod error;
pub mod pipeline;
pub mod plot;
pub mod run;

pub use config::ExperimentConfig;
pub use error::{HarnessError, Result};
pub use pipeline::{Experiment, RunSummary, TrainMode};
