//! Library half of the `auvire` command-line tool. Each `cmd_*` function is
//! one subcommand; the binary only parses flags and maps errors to exit codes.

pub mod commands;
pub mod config;
mod error;

pub use commands::*;
pub use config::{RunConfig, ScoreMode, RESOLVED_CONFIG};
pub use error::{CliError, CliResult};
