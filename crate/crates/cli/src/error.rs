use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {message}")]
    MissingFile { path: String, message: String },
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn missing(path: &Path, e: impl std::fmt::Display) -> Self {
        CliError::MissingFile {
            path: path.display().to_string(),
            message: e.to_string(),
        }
    }

    pub fn failed(e: impl std::fmt::Display) -> Self {
        CliError::Failed(e.to_string())
    }

    /// 2 for usage errors and unreadable inputs, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::MissingFile { .. } => 2,
            CliError::Failed(_) => 1,
        }
    }
}
