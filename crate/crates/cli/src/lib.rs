//! Pipelines behind the `phwm` binary: dataset generation, two-stage
//! training, evaluation, ablations and plotting.

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod pipeline;
pub mod plot;
pub mod runner;

pub use config::ExperimentConfig;
pub use error::{CliError, CliResult};
