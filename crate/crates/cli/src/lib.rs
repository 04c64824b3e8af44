//! Command-line driver: configuration, run manifests and the stages behind
//! each subcommand.

pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;

pub use cli::{run, Cli};
pub use config::{Overrides, RunConfig};
pub use error::{Category, CliError, CliResult};
