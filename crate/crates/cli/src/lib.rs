//! Library side of the `ttsa` binary: configuration loading, the
//! subcommands and their output files.

pub mod commands;
pub mod config;
pub mod output;

use thiserror::Error;

/// Failures mapped onto the process exit codes.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Math(String),
    #[error("{0}")]
    Blowup(String),
    #[error("{0}")]
    Invalid(String),
    #[error("output error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Io(_) => 2,
            CliError::Math(_) => 3,
            CliError::Blowup(_) => 4,
            CliError::Invalid(_) => 5,
        }
    }
}

impl From<ttsa_core::Error> for CliError {
    fn from(e: ttsa_core::Error) -> Self {
        let msg = e.to_string();
        match e.root() {
            ttsa_core::Error::ExperimentInvalid { .. } => CliError::Invalid(msg),
            ttsa_core::Error::Blowup(_) => CliError::Blowup(msg),
            root if root.is_config() => CliError::Config(msg),
            _ => CliError::Math(msg),
        }
    }
}
