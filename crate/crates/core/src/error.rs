use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("file not found: {0}")]
    NotFound(PathBuf),

    #[error("malformed WAV header in {path}: {reason}")]
    MalformedWav { path: PathBuf, reason: String },

    #[error("unsupported WAV encoding in {path}: {encoding}")]
    UnsupportedEncoding { path: PathBuf, encoding: String },

    #[error("empty audio clip")]
    EmptyClip,

    #[error("clip of {len} samples is shorter than one analysis window ({needed} samples)")]
    ClipTooShort { len: usize, needed: usize },

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("duplicate speaker id `{0}`")]
    DuplicateId(String),

    #[error("unknown {field} token `{token}`")]
    UnknownToken { field: &'static str, token: String },

    #[error("clip path for `{id}` does not exist: {path}")]
    DanglingClip { id: String, path: PathBuf },

    #[error("insufficient records: requested {requested}, available {available}")]
    InsufficientRecords { requested: usize, available: usize },

    #[error("noise bank is empty but {count} insertions were requested")]
    EmptyNoiseBank { count: usize },

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("unknown layer `{0}`")]
    UnknownLayer(String),

    #[error("stale tape: recorded at parameter version {tape}, model is at version {model}")]
    StaleTape { tape: u64, model: u64 },

    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        detail: String,
    },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("experiment {0} is not runnable: {1}")]
    Experiment(u32, String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::NotFound(path)
        } else {
            Error::Io { path, source }
        }
    }

    pub(crate) fn shape(expected: impl ToString, got: impl ToString) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
