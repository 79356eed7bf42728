//! Configuration-driven runner for collapsim experiments.
//!
//! One JSON config describes one experiment. A run validates the config,
//! writes `manifest.json`, then the task's CSV files.

pub mod config;
pub mod error;
pub mod run;

pub use config::RunConfig;
pub use error::{CliError, CliResult};
pub use run::{output_dir, run, run_sweep, RunOptions, RunSummary};
