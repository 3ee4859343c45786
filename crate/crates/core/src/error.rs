use thiserror::Error;

/// Errors raised by the fitting library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("singular matrix: pivot {pivot:e} at column {column}")]
    Singular { column: usize, pivot: f64 },

    #[error("point is on the boundary of the parameter domain: {0}")]
    NotInterior(String),

    #[error("invalid target: {0}")]
    InvalidTarget(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("all {0} candidates failed numerically")]
    AllCandidatesFailed(usize),

    #[error("queue is unstable: utilization {0} >= 1")]
    Unstable(f64),

    #[error("R iteration did not converge after {iterations} iterations (last step {last_step:e})")]
    NoConvergence { iterations: usize, last_step: f64 },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("document error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("table error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
