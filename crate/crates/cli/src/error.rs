use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] fxdist::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Machine-readable form written to stderr on failure.
#[derive(Debug, Serialize)]
pub struct ErrorReport {
    pub error: &'static str,
    pub message: String,
    pub exit_code: i32,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub violations: Vec<String>,
}

impl CliError {
    /// 2 for configuration problems, 3 for divergence, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Core(fxdist::Error::Divergence { .. }) => 3,
            CliError::Core(
                fxdist::Error::Invalid(_)
                | fxdist::Error::Parameter(_)
                | fxdist::Error::Domain(_)
                | fxdist::Error::DimensionMismatch { .. }
                | fxdist::Error::Connectivity { .. }
                | fxdist::Error::DegenerateExponent(_)
                | fxdist::Error::NonFinite(_)
                | fxdist::Error::Csv(_)
                | fxdist::Error::UnknownMetric(_),
            ) => 2,
            _ => 1,
        }
    }

    pub fn report(&self) -> ErrorReport {
        let (error, violations) = match self {
            CliError::Config(_) => ("config", Vec::new()),
            CliError::Core(fxdist::Error::Invalid(v)) => ("validation", v.clone()),
            CliError::Core(fxdist::Error::Divergence { .. }) => ("divergence", Vec::new()),
            CliError::Core(_) => ("scenario", Vec::new()),
            CliError::Io(_) => ("io", Vec::new()),
            CliError::Json(_) => ("json", Vec::new()),
        };
        ErrorReport { error, message: self.to_string(), exit_code: self.exit_code(), violations }
    }
}
