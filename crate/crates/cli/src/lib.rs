//! Batch front-end for the `divband` solver.
//!
//! Each subcommand reads one TOML run configuration (see [`config`]) and
//! writes its artifacts into the configured output directory. Commands
//! return an [`Outcome`] when they ran to completion, and exit with 0 when
//! every check passed and 2 otherwise; a [`CliError`] means exit code 1.

pub mod artifacts;
pub mod commands;
pub mod config;
mod error;

pub use commands::{run_converge, run_simulate, run_solve, run_verify, Overrides, THREADS_ENV};
pub use config::RunConfig;
pub use error::{CliError, Outcome};
