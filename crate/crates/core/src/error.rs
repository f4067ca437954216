use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Kernel eigenvalues are not summable.
    #[error("smoothness r = {r} must exceed d/2 = {half_dim}")]
    Summability { r: f64, half_dim: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// Non-finite parameters during training.
    #[error("divergence at step {step} (flow time {flow_time}): {detail}")]
    Divergence { step: u64, flow_time: f64, detail: String },

    /// The training loss increased between consecutive Euler steps.
    #[error("descent violated at step {step}: loss {before} -> {after}")]
    DescentViolation { step: u64, before: f64, after: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
