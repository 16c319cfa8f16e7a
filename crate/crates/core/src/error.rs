//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("non-finite input: {0}")]
    NonFiniteInput(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("backward target must be 1x1, got {rows}x{cols}")]
    NotScalar { rows: usize, cols: usize },

    #[error("batch of {batch} exceeds buffer capacity {capacity}")]
    CapacityExceeded { batch: usize, capacity: usize },

    #[error("buffer head does not match live batch: {0}")]
    HeadMismatch(String),

    #[error("node count {n} exceeds attention capacity {capacity}")]
    BufferOverCapacity { n: usize, capacity: usize },

    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("rows must form probability distributions: {0}")]
    NonDistributionInput(String),

    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),

    #[error("inference requires a non-empty node buffer")]
    EmptyBuffer,

    #[error("labels contain a single class; ROC AUC is undefined")]
    DegenerateLabels,

    #[error("class {class} has {count} samples; {folds}-fold CV needs at least {folds}")]
    InsufficientClassSamples { class: usize, count: usize, folds: usize },

    #[error("bad magic bytes: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("truncated file: {0}")]
    TruncatedFile(String),

    #[error("shape overflow: {0}")]
    ShapeOverflow(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("invalid value for `{key}`: {reason}")]
    InvalidValue { key: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(key: &str, reason: impl Into<String>) -> Self {
        Error::InvalidValue { key: key.to_string(), reason: reason.into() }
    }
}
