use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CvibError {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl CvibError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CvibError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status used by the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            CvibError::Config(_) => 2,
            CvibError::Io { .. } => 3,
            CvibError::NonFinite(_) => 4,
            CvibError::Parse { .. } | CvibError::Serde(_) => 5,
            CvibError::Validation(_) | CvibError::Shape(_) => 6,
        }
    }
}

pub type Result<T> = std::result::Result<T, CvibError>;
