//! Experiment orchestration: configuration, run directories, the end-to-end
//! protocol and its reports.

pub mod config;
pub mod pipeline;
pub mod run;

pub use config::{ConfigError, DataConfig, EmbeddingMode, EvalConfig, ExperimentConfig};
pub use run::{run_experiment, ExperimentOutcome, ExperimentReport, HarnessError, RunManifest, Stage};
