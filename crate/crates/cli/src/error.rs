use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, config keys or values.
    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] prospr_core::Error),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {reason}")]
    Artifact { path: PathBuf, reason: String },

    #[error("{0} already exists; pass --force to overwrite")]
    Exists(PathBuf),

    #[error("gradient check failed: max relative error {max:.3e} exceeds tolerance {tolerance:.1e}")]
    GradCheckFailed { max: f64, tolerance: f64 },

    #[error("{failed} of {total} sweep points failed")]
    SweepFailed { failed: usize, total: usize },
}

impl CliError {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        CliError::Io { context: context.into(), source }
    }

    pub fn artifact(path: impl Into<PathBuf>, reason: impl ToString) -> Self {
        CliError::Artifact { path: path.into(), reason: reason.to_string() }
    }

    /// 1 usage, 2 runtime, 3 gradient check.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::GradCheckFailed { .. } => 3,
            _ => 2,
        }
    }
}
