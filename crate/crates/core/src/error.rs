use thiserror::Error;

/// Errors raised by the tensor container parser.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("bad magic at byte offset {offset}: expected \"FTSR\"")]
    BadMagic { offset: usize },
    #[error("unsupported container version {version} at byte offset {offset}")]
    UnsupportedVersion { offset: usize, version: u8 },
    #[error("unknown dtype code {code} at byte offset {offset}")]
    UnknownDtype { offset: usize, code: u8 },
    #[error("unsupported rank {rank} at byte offset {offset}")]
    BadRank { offset: usize, rank: u8 },
    #[error("nonzero padding byte {value} at byte offset {offset}")]
    BadPadding { offset: usize, value: u8 },
    #[error("zero extent in dimension {axis} at byte offset {offset}")]
    ZeroExtent { offset: usize, axis: usize },
    #[error("truncated {what} at byte offset {offset}: need {needed} bytes, {available} available")]
    Truncated {
        what: &'static str,
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("{count} trailing bytes after payload at byte offset {offset}")]
    TrailingBytes { offset: usize, count: usize },
    #[error("bad archive entry at byte offset {offset}: {reason}")]
    BadArchive { offset: usize, reason: String },
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error in {path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: ParseError,
    },
    #[error(transparent)]
    Format(#[from] ParseError),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid feature set: {0}")]
    InvalidFeatures(String),
    #[error("degenerate feature row {row}: norm {norm:e} below 1e-12")]
    DegenerateFeature { row: usize, norm: f64 },
    #[error("class {class} has {count} samples; at least 2 are required")]
    EmptyClass { class: usize, count: usize },
    #[error("covariance is not positive definite after shrinkage {shrinkage:e}; try a larger shrinkage")]
    NotPositiveDefinite { shrinkage: f64 },
    #[error("SGLD diverged at step {step}, chain {chain}: non-finite gradient")]
    Divergence { step: usize, chain: usize },
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error("non-finite score at ({x}, {y})")]
    NonFiniteScore { x: f64, y: f64 },
    #[error("value out of range: {0}")]
    OutOfRange(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("NaN score in {0}")]
    NanScore(&'static str),
}

impl Error {
    /// True for failures of the numerical pipeline itself, as opposed to
    /// malformed inputs or bad arguments.
    pub fn is_computational(&self) -> bool {
        matches!(
            self,
            Error::NotPositiveDefinite { .. }
                | Error::Divergence { .. }
                | Error::NonFiniteLoss { .. }
                | Error::NonFiniteScore { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
