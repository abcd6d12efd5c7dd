use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the laboratory.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid mask: row {row} has no visible entries")]
    InvalidMask { row: usize },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("index {index} out of range for {what} of size {bound}")]
    Index {
        what: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("non-finite logits during generation at step {step}")]
    NonFiniteLogits { step: usize },
    #[error("variant mismatch: operation requires {expected}, model is {actual}")]
    VariantMismatch { expected: &'static str, actual: String },
    #[error("checkpoint: bad magic")]
    BadMagic,
    #[error("checkpoint: unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint: truncated while reading {0}")]
    Truncated(&'static str),
    #[error("checkpoint: parameter `{name}` has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint: parameter `{name}` stored as dtype code {found}, expected {expected}")]
    DtypeMismatch { name: String, expected: u8, found: u8 },
    #[error("checkpoint: checksum mismatch in parameter `{0}`")]
    Checksum(String),
    #[error("checkpoint: parameter `{found}` out of order, expected `{expected}`")]
    RegistryOrder { expected: String, found: String },
    #[error("stream stalled: text position {needed} is visible but only {revealed} revealed")]
    Stall { needed: usize, revealed: usize },
    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
