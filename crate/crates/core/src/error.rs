//! Error type shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    /// Incompatible tensor shapes for an operation.
    #[error("shape mismatch in `{op}`: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A scalar argument violated its precondition (e.g. a non-positive temperature).
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// A caller broke an API contract (e.g. backward on a non-scalar loss).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Numerical breakdown that cannot be recovered from (e.g. an underflowed kernel).
    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    /// Client/server parameter exchange violated the bundle schema.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// Invalid or unreadable run configuration.
    #[error("config error: {0}")]
    Config(String),

    /// An error that occurred while executing a specific communication round.
    #[error("failure in round {round}: {source}")]
    Round {
        round: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Wrap an error with the communication round it occurred in.
    pub fn at_round(self, round: usize) -> Self {
        Error::Round {
            round,
            source: Box::new(self),
        }
    }
}
