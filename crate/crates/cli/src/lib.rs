//! Command-line front end: run configured experiments, generate synthetic
//! datasets, aggregate run directories and check their artifacts.

pub mod config;
pub mod data;
pub mod report;
pub mod run;

use std::fmt;

pub use config::RunConfig;

/// Exit-code carrying error.
#[derive(Debug)]
pub enum CliError {
    /// Bad configuration or usage; exit 2.
    Config(String),
    /// Failure while running; exit 1.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

impl From<seqcl::Error> for CliError {
    fn from(e: seqcl::Error) -> Self {
        match e {
            seqcl::Error::Configuration(m) => CliError::Config(m),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

pub(crate) fn io_err(path: &std::path::Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}
