//! Orchestration of federated CT imaging experiments: configuration,
//! simulation, training runs, strategy comparisons and result files.

pub mod config;
pub mod error;
pub mod runner;

pub use config::{parse_config, ExperimentConfig, Overrides};
pub use error::{CliError, CliResult};
