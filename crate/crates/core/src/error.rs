use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = OcvtpError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum OcvtpError {
    #[error("configuration error: {field}: {message}")]
    Config { field: String, message: String },

    #[error("storage error at {}: {source}", path.display())]
    Storage {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("index {index} out of bounds for length {len}")]
    Bounds { index: usize, len: usize },

    #[error("capacity error: sequence length {n} exceeds positional table size {n_max}")]
    Capacity { n: usize, n_max: usize },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("training diverged at step {step}: {message}")]
    Training { step: usize, message: String },
}

impl OcvtpError {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        OcvtpError::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn storage(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        OcvtpError::Storage {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line surface: 1 for configuration and
    /// input-contract errors, 2 for I/O and file-format problems, 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            OcvtpError::Config { .. }
            | OcvtpError::Validation(_)
            | OcvtpError::Shape(_)
            | OcvtpError::Bounds { .. }
            | OcvtpError::Capacity { .. } => 1,
            OcvtpError::Storage { .. } | OcvtpError::Format(_) => 2,
            OcvtpError::Numerical(_) | OcvtpError::Training { .. } => 3,
        }
    }
}
