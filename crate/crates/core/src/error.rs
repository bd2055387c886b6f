use thiserror::Error;

/// Errors raised by the sampler, its estimators and the file formats.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("parameter {value} outside the model domain ({domain})")]
    OutOfDomain { value: f64, domain: &'static str },

    #[error("datum incompatible with model: {0}")]
    IncompatibleDatum(String),

    #[error("{0} does not support {1}")]
    Unsupported(&'static str, &'static str),

    #[error("shard {0} is empty")]
    EmptyShard(usize),

    #[error("index {index} out of range for {len} items")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("invalid probability vector: {0}")]
    InvalidProbabilities(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite value at step {step}: {what}")]
    NonFinite { step: u64, what: String },

    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("matrix is not symmetric positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("enumeration needs {outcomes} outcomes, cap is {cap}")]
    EnumerationCap { outcomes: u128, cap: u128 },

    #[error("infeasible sharding: {0}")]
    Infeasible(String),

    #[error("malformed data: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn check_dim(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, found })
    }
}
