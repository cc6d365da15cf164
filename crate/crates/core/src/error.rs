use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("degenerate exponent: {0}")]
    DegenerateExponent(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("graph is not connected (lambda2 = {lambda2:e})")]
    Connectivity { lambda2: f64 },

    #[error("unsupported operation: {0}")]
    Unsupported(&'static str),

    #[error("divergence at step {step} (t = {time}) in agent {agent}")]
    Divergence { step: u64, time: f64, agent: usize },

    #[error("unknown metric `{0}`")]
    UnknownMetric(String),

    #[error("incompatible traces: {0}")]
    IncompatibleTraces(String),

    #[error("scenario rejected: {}", .0.join("; "))]
    Invalid(Vec<String>),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
