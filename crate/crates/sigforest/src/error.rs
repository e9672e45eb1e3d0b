//! Error type shared across the crate.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dataset must contain at least two rows")]
    EmptyDataset,

    #[error("non-finite value at row {row}, column {col}")]
    NonFiniteValue { row: usize, col: usize },

    #[error("expected {expected} feature(s), got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("top fraction must lie in (0, 1], got {0}")]
    InvalidFraction(f64),

    #[error("k-means needs at least {k} sample(s), got {samples}")]
    TooFewSamples { samples: usize, k: usize },

    #[error("row {row}, column {col}: cannot parse {token:?} as a finite number")]
    ParseError {
        row: usize,
        col: usize,
        token: String,
    },

    #[error("duplicate header column {0:?}")]
    DuplicateHeader(String),

    #[error("duplicate row id {0:?}")]
    DuplicateRowId(String),

    #[error("file {} is empty", .0.display())]
    EmptyFile(PathBuf),

    #[error("flux integral must be positive for row {row_id:?}")]
    NonPositiveIntegral { row_id: String },

    #[error("negative uncertainty at row {row}, column {col}")]
    NegativeUncertainty { row: usize, col: usize },

    #[error("invalid spectra input: {0}")]
    InvalidSpectra(String),

    #[error("unsupported model format version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("corrupt model file: {0}")]
    CorruptModel(String),

    #[error("schema mismatch: missing columns {missing:?}, unexpected columns {extra:?}")]
    SchemaMismatch {
        missing: Vec<String>,
        extra: Vec<String>,
    },

    #[error("unknown row id {0:?}")]
    UnknownRowId(String),

    #[error("invariant violation: {0}")]
    InvariantViolation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
