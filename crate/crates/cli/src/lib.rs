//! Command-line layer of vseg: file formats, configuration and the
//! subcommands behind the `vseg` binary.

pub mod commands;
pub mod config;
pub mod error;
pub mod io;

pub use error::{CliError, Result};
