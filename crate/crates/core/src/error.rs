use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("degenerate class {0}: noisy prior is zero")]
    DegenerateClass(usize),

    #[error("enumeration needs {required} loss evaluations, budget is {budget}; use Monte Carlo instead")]
    BudgetExceeded { required: u128, budget: u128 },

    #[error("degenerate anchor {0}: no same-label positive in the batch")]
    DegenerateAnchor(usize),

    #[error("hypothesis rejected: {0}")]
    HypothesisRejected(String),

    #[error("hypothesis violated: {0}")]
    HypothesisViolated(String),

    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },

    #[error("malformed config: {0}")]
    MalformedConfig(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }
}
