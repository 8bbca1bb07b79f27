//! Driver for the `otrecon` command-line tool: configuration, run manifests, the
//! subcommands and the numerical verification suites they share.

pub mod checks;
pub mod commands;
pub mod config;
pub mod error;
pub mod figures;
pub mod manifest;
pub mod metrics;
pub mod props;
pub mod setup;

pub use commands::{run, Command};
pub use config::Config;
pub use error::{CliError, CliResult};
