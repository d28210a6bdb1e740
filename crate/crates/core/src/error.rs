use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CdaError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CdaError {
    /// An argument outside an operation's domain (bad class id, label out of range, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Inconsistent model, plan or experiment configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// A file whose layout does not match what the reader expects.
    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    /// Well-formed bytes carrying unusable values (NaN, Inf).
    #[error("data error: {0}")]
    Data(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    /// A metric whose definition needs at least one prediction.
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// A training-time contract was broken (e.g. a frozen parameter group changed).
    #[error("invariant violation: {0}")]
    Invariant(String),
}

impl CdaError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CdaError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        CdaError::Json {
            path: path.into(),
            source,
        }
    }
}
