use std::path::PathBuf;

use thiserror::Error;

/// Everything that can go wrong inside the forecasting core.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("input too short: series length {len} is below the required {required}")]
    InputTooShort { len: usize, required: usize },

    #[error("capacity error: {required} patches required but positional table holds {available}")]
    Capacity { required: usize, available: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("load error in {path} at row {row}, column {col}: {msg}")]
    Load {
        path: PathBuf,
        row: usize,
        col: usize,
        msg: String,
    },

    #[error("split too small: segment '{segment}' has {len} rows, need at least {required}")]
    SplitTooSmall {
        segment: &'static str,
        len: usize,
        required: usize,
    },

    #[error("training error: {0}")]
    Training(String),

    #[error("divergence: non-finite loss at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("determinism error: two baseline evaluations differ ({first} vs {second})")]
    Determinism { first: f64, second: f64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
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

pub type Result<T, E = Error> = std::result::Result<T, E>;
