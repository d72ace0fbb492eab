use std::path::PathBuf;

use thiserror::Error;

use crate::octree::ChunkAddress;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Input that violates a value contract (zero contact count, out-of-range affinity, ...).
    #[error("malformed input: {0}")]
    Malformed(String),

    /// A file that parsed but does not describe a valid object.
    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    /// Checksum mismatch, truncation, or bad magic.
    #[error("corrupt entry {path}: {detail}")]
    Corrupt { path: PathBuf, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A task's input has not been committed yet. Retriable.
    #[error("chunk {0} is missing a committed dependency: {1}")]
    MissingDependency(ChunkAddress, String),

    /// Invalid synthetic dataset or run configuration.
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("task {address} failed {attempts} times, last error: {last}")]
    Poisoned {
        address: ChunkAddress,
        attempts: u32,
        last: String,
    },

    /// A worker died or reported failure. Retriable.
    #[error("task {address} failed: {reason}")]
    TaskFailed {
        address: ChunkAddress,
        reason: String,
    },

    #[error("run interrupted after {0} committed tasks")]
    Interrupted(usize),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn corrupt(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Corrupt {
            path: path.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// True for failures a scheduler may retry without operator action.
    pub fn is_retriable(&self) -> bool {
        !matches!(
            self,
            Error::Corrupt { .. } | Error::Format { .. } | Error::Config(_) | Error::Malformed(_)
        )
    }

    /// True for checksum and structural damage in stored data.
    pub fn is_corruption(&self) -> bool {
        matches!(self, Error::Corrupt { .. } | Error::Format { .. })
    }
}
