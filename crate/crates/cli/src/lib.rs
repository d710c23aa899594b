//! Config-driven runner for the synthetic transfer suites: data
//! generation, theory checks, experiments, plots.

pub mod config;
pub mod error;
pub mod output;
pub mod persist;
pub mod plots;
pub mod report;
pub mod runner;

pub use config::{ExperimentConfig, Method, Suite, Transfer};
pub use error::{CliError, Result};
