//! Command-line front end: TOML configs, the `mintime`, `channel` and
//! `simulate` commands, and their CSV/JSON artifacts.

pub mod commands;
pub mod config;
pub mod output;

use std::fmt;

/// Failure classes, each with its process exit code.
#[derive(Debug, Clone, PartialEq)]
pub enum CliError {
    /// Bad config, bad input file or invalid arguments (exit 1).
    Config(String),
    /// Could not write an artifact (exit 1).
    Io(String),
    /// Numerical failure (exit 2).
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Io(_) => 1,
            CliError::Numerical(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

impl std::error::Error for CliError {}
