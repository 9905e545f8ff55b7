use thiserror::Error;

/// Errors raised across the estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("invalid schema: {0}")]
    Schema(String),

    #[error("unknown column `{column}`{}", .row.map(|r| format!(" (row {r})")).unwrap_or_default())]
    UnknownColumn { column: String, row: Option<usize> },

    #[error("row {row}, column `{column}`: value `{value}` is not a declared category")]
    UndeclaredCategory { row: usize, column: String, value: String },

    #[error("row {row}, column `{column}`: cannot parse `{value}`")]
    BadCell { row: usize, column: String, value: String },

    #[error("row {row} has {found} fields, expected {expected}")]
    RaggedRow { row: usize, found: usize, expected: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("column `{column}` has no observed values")]
    FullyMissing { column: String },

    #[error("column `{column}` has {observed} observed values, fewer than the donor pool size {donor_k}")]
    DonorPoolTooSmall {
        column: String,
        observed: usize,
        donor_k: usize,
    },

    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("rank-deficient design; collinear columns: {0:?}")]
    RankDeficient(Vec<String>),

    #[error("singular system: {0}")]
    Singular(String),

    #[error("no convergence after {iterations} iterations (objective {objective})")]
    NoConvergence { iterations: usize, objective: f64 },

    #[error("{failed} of {total} bootstrap replicates failed")]
    ReplicateFailures { failed: usize, total: usize },

    #[error("stratum `{0}` is too small")]
    StratumTooSmall(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
