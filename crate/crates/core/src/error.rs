use thiserror::Error;

use crate::autodiff::AutodiffError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),

    #[error("{what}: expected dimension {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("degenerate similarity feature: projected norm {norm:e} is not above 1e-12")]
    DegenerateSimilarity { norm: f64 },

    #[error("score {0} is outside the open interval (0, 1)")]
    ScoreOutOfRange(f64),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("batch of {got} is too small, need at least {needed}")]
    BatchTooSmall { needed: usize, got: usize },

    #[error("empty batch")]
    EmptyBatch,

    #[error("degenerate moments: mean {mean}, variance {variance:e}")]
    DegenerateMoments { mean: f64, variance: f64 },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error("configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Problems decoding one of the binary file formats.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported version {found} (expected {expected})")]
    Version { expected: u32, found: u32 },
    #[error("truncated input while reading {0}")]
    Truncated(&'static str),
    #[error("inconsistent file: {0}")]
    Inconsistent(String),
}
