//! Configuration, on-disk formats and the subcommands behind the `avfusion`
//! binary.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;

pub use error::{CliError, Result};
