use std::path::{Path, PathBuf};

use thiserror::Error;

/// Failures that stop a command (exit code 1).
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Parse(String),

    #[error("config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("missing artifact {0}")]
    MissingArtifact(PathBuf),

    #[error("malformed artifact {path}: {message}")]
    Artifact { path: PathBuf, message: String },

    #[error("policy was solved for model {policy}, config describes model {config}")]
    HashMismatch { policy: String, config: String },

    #[error(transparent)]
    Core(#[from] divband::Error),
}

impl CliError {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        CliError::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        if source.kind() == std::io::ErrorKind::NotFound {
            return CliError::MissingArtifact(path.to_path_buf());
        }
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn artifact(path: &Path, message: impl Into<String>) -> Self {
        CliError::Artifact {
            path: path.to_path_buf(),
            message: message.into(),
        }
    }
}

/// Result of a command that ran to completion.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    /// Every check passed.
    pub verified: bool,
    /// Human-readable summary for stdout.
    pub summary: String,
}

impl Outcome {
    pub fn exit_code(&self) -> i32 {
        if self.verified {
            0
        } else {
            2
        }
    }
}
