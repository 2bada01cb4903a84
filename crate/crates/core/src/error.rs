use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dataset: {0}")]
    Dataset(String),
    #[error("resampling failed: {0}")]
    Resampling(String),
    #[error("model error: {0}")]
    Model(String),
    #[error("federation error: {0}")]
    Federation(String),
    #[error("metrics error: {0}")]
    Metrics(String),
    #[error("invalid experiment configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Failures while reading or writing checkpoint files.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic bytes {0:?}, expected \"FEDH\"")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    VersionMismatch(u32),
    #[error("checkpoint truncated: {0}")]
    Truncated(String),
    #[error("manifest is inconsistent with payload: {0}")]
    Inconsistent(String),
    #[error("integrity check failed: {0}")]
    Integrity(String),
    #[error("expected a {expected} checkpoint, found {found}")]
    WrongKind { expected: String, found: String },
    #[error("refusing to write non-finite value in {0}")]
    NonFinite(String),
    #[error("malformed manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}
