use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A documented precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("dataset: {0}")]
    Dataset(#[from] DatasetError),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable identifier, used for machine-parseable CLI errors.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape_mismatch",
            Error::Contract(_) => "contract",
            Error::NonFinite(_) => "non_finite",
            Error::Dataset(e) => e.kind(),
            Error::Checkpoint(_) => "checkpoint",
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
        }
    }
}

/// Failures while decoding an EEGD dataset file.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum DatasetError {
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u8),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("{extra} unexpected trailing bytes")]
    TrailingBytes { extra: usize },
    #[error("malformed record {index}: {detail}")]
    MalformedRecord { index: usize, detail: String },
}

impl DatasetError {
    pub fn kind(&self) -> &'static str {
        match self {
            DatasetError::BadMagic(_) => "dataset_bad_magic",
            DatasetError::UnsupportedVersion(_) => "dataset_version",
            DatasetError::MalformedHeader(_) => "dataset_header",
            DatasetError::Truncated { .. } => "dataset_truncated",
            DatasetError::ChecksumMismatch { .. } => "dataset_checksum",
            DatasetError::TrailingBytes { .. } => "dataset_trailing",
            DatasetError::MalformedRecord { .. } => "dataset_record",
        }
    }
}
