//! Batch entry points for the `leuq` binary.

pub mod commands;
pub mod config;
pub mod error;

pub use commands::{run, Cli};
pub use error::{CliError, CliResult};
