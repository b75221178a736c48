//! File formats, configuration and the experiment runner around
//! `fedspar-core`.

pub mod ablate;
pub mod cache;
pub mod config;
pub mod idx;
pub mod payload;
pub mod runner;

pub use config::ExperimentConfig;
pub use runner::{run_experiment, RunError, RunOptions, RunOutput, Summary};
