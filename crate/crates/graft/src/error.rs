use std::io;
use std::path::PathBuf;

use thiserror::Error;

use crate::snapshot::SnapshotError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] graft_core::Error),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{}: {source}", path.display())]
    Snapshot {
        path: PathBuf,
        #[source]
        source: SnapshotError,
    },
    /// Config text that does not parse or names an unknown key.
    #[error("{0}")]
    ConfigSyntax(String),
    #[error("{0}")]
    Format(String),
    #[error("a worker exited without reporting")]
    WorkerLost,
}

impl Error {
    /// Stable one-word category used in the command-line error line.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Core(e) => e.category(),
            Error::Io { .. } => "io",
            Error::Snapshot { source, .. } => source.category(),
            Error::ConfigSyntax(_) => "config",
            Error::Format(_) => "format",
            Error::WorkerLost => "worker",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Format(e.to_string())
    }
}
