use std::io;
use std::path::{Path, PathBuf};

/// Process exit status for each error class.
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum AppError {
    #[error("usage: {0}")]
    Usage(String),

    #[error("{0}")]
    Data(String),

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error(transparent)]
    Model(#[from] mcnet_core::Error),
}

impl AppError {
    pub fn data(msg: impl Into<String>) -> Self {
        AppError::Data(msg.into())
    }

    pub fn io(path: &Path, source: io::Error) -> Self {
        AppError::Io { path: path.to_path_buf(), source }
    }

    pub fn exit_code(&self) -> i32 {
        use mcnet_core::Error as E;
        match self {
            AppError::Usage(_) => EXIT_USAGE,
            AppError::Data(_) | AppError::Io { .. } => EXIT_DATA,
            AppError::Numeric(_) => EXIT_NUMERIC,
            AppError::Model(E::NonFinite { .. } | E::MissingAdjoint { .. } | E::CyclicTape { .. }) => EXIT_NUMERIC,
            AppError::Model(E::Config(_)) => EXIT_USAGE,
            AppError::Model(_) => EXIT_DATA,
        }
    }
}

pub type Result<T> = std::result::Result<T, AppError>;
