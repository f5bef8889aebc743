use kmn_bench::BenchError;
use kmn_service::pp::BAD_REQUEST;
use kmn_service::{PpClientError, PpError};
use thiserror::Error;

/// Failure classes of the binary, one exit code each.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("network: {0}")]
    Network(String),
    #[error("protocol: {0}")]
    Protocol(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Other(_) => 1,
            CliError::Config(_) => 2,
            CliError::Network(_) => 3,
            CliError::Protocol(_) => 4,
        }
    }

    pub fn config(e: impl std::fmt::Display) -> Self {
        CliError::Config(e.to_string())
    }

    pub fn network(e: impl std::fmt::Display) -> Self {
        CliError::Network(e.to_string())
    }

    pub fn other(e: impl std::fmt::Display) -> Self {
        CliError::Other(e.to_string())
    }
}

impl From<PpClientError> for CliError {
    fn from(e: PpClientError) -> Self {
        match &e {
            PpClientError::Rpc(_) => CliError::Network(e.to_string()),
            PpClientError::Status { status, .. } if *status == BAD_REQUEST => CliError::Config(e.to_string()),
            _ => CliError::Protocol(e.to_string()),
        }
    }
}

impl From<PpError> for CliError {
    fn from(e: PpError) -> Self {
        match &e {
            PpError::BadRequest(_) => CliError::Config(e.to_string()),
            PpError::Storage(_) => CliError::Other(e.to_string()),
            _ => CliError::Protocol(e.to_string()),
        }
    }
}

impl From<BenchError> for CliError {
    fn from(e: BenchError) -> Self {
        match &e {
            BenchError::Config(_) => CliError::Config(e.to_string()),
            BenchError::Health(_) => CliError::Network(e.to_string()),
            BenchError::Setup(_) => CliError::Other(e.to_string()),
        }
    }
}
