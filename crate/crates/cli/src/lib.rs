//! Batch front-end: experiment specs, sweeps and artifact files.

pub mod error;
pub mod runner;
pub mod spec;

pub use error::{CliError, Result};
pub use runner::{run_experiment, run_single, thread_pool, Outcome, Overrides};
pub use spec::{validate, ExperimentSpec, ValidationReport};
