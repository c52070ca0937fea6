use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    /// Training produced a non-finite loss. `last_good` holds the model as
    /// it was after the last finite epoch.
    #[error("training diverged: {message}")]
    Diverged {
        message: String,
        last_good: Option<Box<crate::nn::Model>>,
    },

    #[error("tape error: {0}")]
    Tape(String),

    #[error("missing gradient for parameter {0}")]
    MissingGradient(usize),

    #[error("model `{0}` is frozen and cannot be updated")]
    Frozen(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("spec digest mismatch: expected {expected:016x}, found {found:016x}")]
    DigestMismatch { expected: u64, found: u64 },

    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),

    #[error("config error at line {line}, column {column}: {message}")]
    Config {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("duplicate key `{key}` on lines {first} and {second}")]
    DuplicateKey {
        key: String,
        first: usize,
        second: usize,
    },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("missing input: {}", .0.display())]
    MissingInput(PathBuf),

    #[error("missing model: {0}")]
    MissingModel(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
