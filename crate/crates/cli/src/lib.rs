//! Library side of the `ktlab` command-line tool: configs, runs, artifacts.

pub mod cli;
pub mod config;
pub mod fixtures;
pub mod output;
pub mod run;

pub use config::{parse_config, ConfigError, ConfigViolation, ExperimentConfig};
pub use run::{run_experiment, RunOptions, RunOutcome, RunStatus};
