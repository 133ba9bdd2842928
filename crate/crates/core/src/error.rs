use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// A shape, range or precondition contract was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("scene generation failed: {0}")]
    Generation(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("integrity error in {path}: {reason}")]
    Integrity { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// More groundtruth instances than prediction slots.
    #[error("capacity error: {gt} groundtruth instances but only {slots} predictions")]
    Capacity { gt: usize, slots: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    /// A loss or parameter became non-finite during training.
    #[error("training diverged at step {step}: {detail} (last good checkpoint: {last_good})")]
    Divergence {
        step: u64,
        detail: String,
        last_good: String,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn integrity(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Integrity {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::Contract(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;
