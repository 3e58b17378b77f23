use std::path::PathBuf;

use crate::datastore::StoreError;

/// Top-level failure of a subcommand. Each variant maps to its own exit code.
#[derive(Debug, thiserror::Error)]
pub enum AppError {
    #[error("config: {0}")]
    Config(String),
    #[error("i/o on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("backend: {0}")]
    Backend(String),
    #[error("validation: {0}")]
    Validation(String),
    #[error("missing upstream stage `{stage}`: {path} does not exist")]
    MissingStage { stage: &'static str, path: PathBuf },
}

pub const EXIT_CONFIG: u8 = 3;
pub const EXIT_IO: u8 = 4;
pub const EXIT_BACKEND: u8 = 5;
pub const EXIT_VALIDATION: u8 = 6;
pub const EXIT_MISSING_STAGE: u8 = 7;

impl AppError {
    pub fn exit_code(&self) -> u8 {
        match self {
            AppError::Config(_) => EXIT_CONFIG,
            AppError::Io { .. } => EXIT_IO,
            AppError::Backend(_) => EXIT_BACKEND,
            AppError::Validation(_) => EXIT_VALIDATION,
            AppError::MissingStage { .. } => EXIT_MISSING_STAGE,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AppError::Io { path: path.into(), source }
    }
}

impl From<StoreError> for AppError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::Io { path, source } => AppError::Io { path, source },
            other => AppError::Validation(other.to_string()),
        }
    }
}

pub type Result<T, E = AppError> = std::result::Result<T, E>;
