use thiserror::Error;

/// Errors raised across the simulator.
///
/// The variants line up with the failure classes the CLI maps to exit codes:
/// configuration problems exit with 2, everything else with 3.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ElsaError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("aggregation error: {0}")]
    Aggregation(String),
    #[error("decode error: {0}")]
    Decode(String),
    #[error("unavailable: {0}")]
    Unavailable(String),
}

impl ElsaError {
    pub fn is_config(&self) -> bool {
        matches!(self, ElsaError::Config(_))
    }
}

pub type Result<T> = std::result::Result<T, ElsaError>;
