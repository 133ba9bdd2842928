use std::path::PathBuf;

use thiserror::Error;

/// Process exit statuses.
pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;
pub const EXIT_CHECK_FAILED: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("invalid config {path}: {message}")]
    Config { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("plot {path}: {message}")]
    Plot { path: PathBuf, message: String },
    #[error("{0} check(s) failed")]
    ChecksFailed(usize),
    #[error(transparent)]
    Core(#[from] uniquery::Error),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        use uniquery::Error as E;
        match self {
            CliError::Usage(_) | CliError::Config { .. } => EXIT_USAGE,
            CliError::Io { .. } | CliError::Plot { .. } => EXIT_IO,
            CliError::ChecksFailed(_) => EXIT_CHECK_FAILED,
            CliError::Core(e) => match e {
                E::Divergence { .. } => EXIT_DIVERGED,
                E::Io { .. } | E::Integrity { .. } => EXIT_IO,
                E::Contract(_)
                | E::Config(_)
                | E::Capacity { .. }
                | E::Generation(_)
                | E::NotFound(_) => EXIT_USAGE,
            },
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
