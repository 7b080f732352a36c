use std::path::Path;

use thiserror::Error;

/// Failures of the command-line layer, split by the exit code they map to.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("integrity error: {0}")]
    Integrity(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) | CliError::Integrity(_) => 3,
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Data(format!("{}: {e}", path.display()))
    }
}

impl From<trimodal_core::Error> for CliError {
    fn from(e: trimodal_core::Error) -> Self {
        use trimodal_core::Error as E;
        match e {
            E::InvalidConfig(_) | E::UnsupportedModality(_) | E::InvalidStep { .. } => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
