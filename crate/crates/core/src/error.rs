//! Crate-wide error type.

use thiserror::Error;

/// Convenience alias used by every fallible operation in the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors surfaced by the library.
///
/// Variants are grouped by failure class rather than by module so callers
/// can match on *what went wrong* (bad input, failed numeric search,
/// unreadable file) without caring where it happened.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument violated a documented precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Two collections that must be aligned had different lengths.
    #[error("length mismatch: {left} vs {right} ({what})")]
    LengthMismatch {
        /// Length of the first collection.
        left: usize,
        /// Length of the second collection.
        right: usize,
        /// What was being aligned.
        what: &'static str,
    },

    /// A point had the wrong number of coordinates for the model it was
    /// evaluated against.
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch {
        /// Dimension the model was built with.
        expected: usize,
        /// Dimension of the offending point.
        got: usize,
    },

    /// A required collection was empty.
    #[error("empty input: {0}")]
    Empty(&'static str),

    /// A structured text file could not be parsed.
    #[error("parse error at line {line}: {message}")]
    Parse {
        /// 1-based line number in the source file (header = line 1).
        line: u64,
        /// Description of the problem.
        message: String,
    },

    /// Every candidate in a hyper-parameter search produced a degenerate
    /// objective value.
    #[error("search failed: degenerate objective for all candidates {candidates:?}")]
    SearchFailure {
        /// The candidate values that were tried, as `f64`.
        candidates: Vec<f64>,
    },

    /// An iterative fit produced non-finite parameters or loss.
    #[error("fit failed: {0}")]
    FitFailure(String),

    /// Underlying I/O failure.
    #[error(transparent)]
    Io(#[from] std::io::Error),

    /// CSV layer failure not attributable to a specific data row.
    #[error(transparent)]
    Csv(#[from] csv::Error),

    /// JSON (de)serialization failure.
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Shorthand for [`Error::InvalidInput`] with formatted text.
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
