//! Shared error types.

use thiserror::Error;

/// Errors from the numeric core, clustering, and codecs.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated an operation's preconditions.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// An input is too degenerate for the operation to be defined
    /// (e.g. zero variance where a standardized moment is requested).
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// An in-memory compressed layer is internally inconsistent.
    #[error("corrupt layer: {0}")]
    CorruptLayer(String),

    /// A serialized artifact failed validation.
    #[error(transparent)]
    CorruptFile(#[from] FormatError),

    /// A tensor manifest or referenced tensor file is unusable.
    #[error("manifest: {0}")]
    Manifest(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Validation failures when decoding a CLSC file. Each rejection mode is a
/// distinct variant so callers (and fuzzers) can tell corruption classes apart.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic bytes (not a CLSC file)")]
    BadMagic,
    #[error("unsupported format version {0}")]
    BadVersion(u8),
    #[error("unsupported codebook precision byte {0}")]
    BadPrecision(u8),
    #[error("file truncated: need {needed} bytes, have {have}")]
    Truncated { needed: u64, have: u64 },
    #[error("crc mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    CrcMismatch { stored: u32, computed: u32 },
    #[error("layer {layer}: {reason}")]
    BadLayer { layer: usize, reason: String },
    #[error("{0} trailing bytes after last layer")]
    TrailingBytes(u64),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
