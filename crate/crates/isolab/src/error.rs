use std::path::PathBuf;

use crate::checkpoint::CheckpointError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] isolab_core::Error),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    /// A user-supplied input file exists but cannot be parsed.
    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{}: {source}", path.display())]
    Checkpoint {
        path: PathBuf,
        source: CheckpointError,
    },
    #[error("{0}")]
    Usage(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }

    /// Process exit status: 2 for bad arguments, configuration or input
    /// files, 1 for failures during the computation itself.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Core(e) if e.is_config() => 2,
            Error::Core(isolab_core::Error::DimensionMismatch { .. }) => 2,
            Error::Core(_) => 1,
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 2,
            Error::Io { .. } => 1,
            Error::Parse { .. } | Error::Checkpoint { .. } | Error::Usage(_) => 2,
        }
    }
}
