use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("{0} must not be empty")]
    Empty(&'static str),

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error(
        "coordinate descent did not converge after {sweeps} sweeps \
         (last max coefficient change {last_delta:.3e}, lambda {lambda:.3e})"
    )]
    NonConvergence {
        sweeps: usize,
        last_delta: f64,
        lambda: f64,
    },

    #[error("invalid data: {0}")]
    Data(String),

    #[error("audit log verification failed at row {row}: {reason}")]
    ReplayMismatch { row: usize, reason: String },

    #[error("too many replicate failures: {failed} of {total} (limit {limit})")]
    ReplicateFailures {
        failed: usize,
        total: usize,
        limit: usize,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
