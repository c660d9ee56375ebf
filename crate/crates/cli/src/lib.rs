//! Library side of the `pda` command: file formats, config and commands.

pub mod bench;
pub mod commands;
pub mod config;
pub mod error;
pub mod features;
pub mod task;

pub use error::{CliError, CliResult};
