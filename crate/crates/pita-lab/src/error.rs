//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A policy returned an invalid action distribution (negative mass or
    /// sum away from 1 beyond tolerance).
    #[error("invalid action distribution: {reason}")]
    Distribution { reason: String },

    /// Exhaustive enumeration or backward induction exceeded its node or
    /// completion budget.
    #[error("enumeration budget of {limit} exceeded")]
    BudgetExceeded { limit: usize },

    /// A temperature parameter must be strictly positive.
    #[error("eta must be > 0, got {0}")]
    NonPositiveEta(f64),

    /// Every action in the reference support was scored -inf, so the tilted
    /// distribution cannot be normalized.
    #[error("degenerate guided state: all reference-support actions scored -inf")]
    DegenerateState,

    /// A trajectory carries positive mass under the query policy but zero
    /// mass under the reference.
    #[error("absolute continuity violated: {0}")]
    AbsoluteContinuity(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// An oracle or model was used in a mode its inputs do not support.
    #[error("mode error: {0}")]
    Mode(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn distribution(reason: impl Into<String>) -> Self {
        Error::Distribution { reason: reason.into() }
    }

    pub fn parse(reason: impl Into<String>) -> Self {
        Error::Parse(reason.into())
    }

    pub fn config(reason: impl Into<String>) -> Self {
        Error::Config(reason.into())
    }
}
