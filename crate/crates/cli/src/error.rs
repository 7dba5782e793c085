use std::path::Path;

use patchformer_core::Error;
use thiserror::Error;

/// Process exit status for each failure class.
pub mod exit {
    pub const OK: i32 = 0;
    pub const USAGE: i32 = 1;
    pub const DATA: i32 = 2;
    pub const NUMERICAL: i32 = 3;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage error: {0}")]
    Usage(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("gradient check failed: {0}")]
    GradCheck(String),

    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Core(Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    /// 1 for usage and configuration problems, 2 for unreadable or
    /// unsuitable data, 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => exit::USAGE,
            CliError::GradCheck(_) => exit::NUMERICAL,
            CliError::Core(e) => match e {
                Error::Config(_) | Error::Capacity { .. } | Error::Checkpoint(_) | Error::Dimension(_) => {
                    exit::USAGE
                }
                Error::Data(_)
                | Error::Load { .. }
                | Error::Io { .. }
                | Error::SplitTooSmall { .. }
                | Error::InputTooShort { .. } => exit::DATA,
                Error::Training(_)
                | Error::Divergence { .. }
                | Error::NonFinite(_)
                | Error::Determinism { .. } => exit::NUMERICAL,
            },
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
