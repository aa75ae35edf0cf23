//! Experiment runner for the zia pipeline: presets, report bundles and the
//! `run`, `bench-attention`, `validate` and `simulate` commands.

pub mod bench;
pub mod cli;
pub mod config;
pub mod error;
pub mod report;
pub mod run;
pub mod simulate;

pub use config::{validate_config, ExperimentConfig};
pub use error::{CliError, Result};
pub use report::ReportBundle;
pub use run::run_experiment;
