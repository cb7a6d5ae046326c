use std::path::PathBuf;

use thiserror::Error;

/// Failures of a CLI command, each mapped to a process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("numerical abort: {0}")]
    Numerical(String),

    #[error("check failed: {0}")]
    CheckFailed(String),
}

impl CliError {
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        CliError::Config { key: key.into(), message: message.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io { .. } => 1,
            CliError::Config { .. } => 2,
            CliError::Numerical(_) => 3,
            CliError::CheckFailed(_) => 4,
        }
    }
}

impl From<riescomp::Error> for CliError {
    fn from(e: riescomp::Error) -> Self {
        CliError::Numerical(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
