use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("code distance must be an odd integer >= 3, got {0}")]
    InvalidDistance(i64),
    #[error("GF(2) system is singular: {0}")]
    Singular(String),
    #[error("enumeration bound exceeded: {candidates} candidates > limit {limit}")]
    EnumerationTooLarge { candidates: u128, limit: u128 },
    #[error("schedule error: {0}")]
    Schedule(String),
    #[error("malformed operation: {0}")]
    MalformedOperation(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("fit failed: {0}")]
    FitFailed(String),
    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },
    #[error("unsupported file version {found} (expected {expected})")]
    Version { found: u16, expected: u16 },
    #[error("bad magic bytes in {0}")]
    BadMagic(String),
    #[error("checksum mismatch in record {record}")]
    Checksum { record: usize },
    #[error("truncated file: {0}")]
    Truncated(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    IoBare(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
