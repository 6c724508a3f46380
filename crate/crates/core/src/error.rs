use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration value; `field` names the offending key or dimension.
    #[error("configuration error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("index {index} out of range for size {len}")]
    OutOfRange { index: usize, len: usize },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("stale forward trace: recorded at parameter version {trace}, network is at {current}")]
    StaleTrace { trace: u64, current: u64 },
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::Shape(_) | Error::OutOfRange { .. } => 2,
            Error::Io { .. } | Error::Corrupt(_) => 3,
            Error::Numeric(_) | Error::StaleTrace { .. } => 4,
        }
    }
}
