//! Crate-wide error type and result alias.

use thiserror::Error;

/// Errors produced by validation, fitting, sampling, and I/O.
#[derive(Debug, Error)]
pub enum Error {
    /// Structurally invalid input (bad sizes, out-of-range values, malformed files).
    #[error("invalid input: {0}")]
    Invalid(String),

    /// Two inputs that must agree in shape do not.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// A NaN or infinity was found where a finite value is required.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Cells referenced by the data contain no observations.
    #[error("empty cells: {0:?}")]
    EmptyCells(Vec<usize>),

    /// An optimizer or sampler could not produce a usable result.
    #[error("computation failed: {0}")]
    Numerical(String),

    /// Post-fit quality gates (R-hat, ESS, divergences) were not met.
    #[error("diagnostics failed: {0}")]
    Diagnostics(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
