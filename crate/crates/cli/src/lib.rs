//! Experiment harness: configuration, seeded replications, CSV metrics and
//! instance serialization for the `riescomp` solvers.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;
pub mod problems;

pub use commands::{execute, Command};
pub use config::ExperimentConfig;
pub use error::{CliError, CliResult};
