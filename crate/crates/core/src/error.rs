use thiserror::Error;

/// Errors raised anywhere in the laboratory.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("capacity exceeded: {what} = {size} > cap {cap}")]
    Capacity { what: &'static str, size: usize, cap: usize },

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("marginal mismatch: residual {0:e}")]
    MarginalMismatch(f64),

    #[error("coupling is not causal: residual {0:e}")]
    NotCausal(f64),

    #[error("linear program is {0}")]
    LpStatus(&'static str),

    #[error("internal consistency check failed: {0}")]
    Consistency(String),

    #[error("wealth positivity violated at node {node}: return {ret}")]
    WealthPositivity { node: usize, ret: f64 },

    #[error("payoff Lipschitz spot-check failed: |Δℓ| = {diff} > K·d = {bound}")]
    Lipschitz { diff: f64, bound: f64 },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Invalid(msg.into()))
}
