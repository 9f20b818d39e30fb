use std::process::ExitCode;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Verification(String),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        match self {
            CliError::Usage(_) => ExitCode::from(1),
            CliError::Data(_) => ExitCode::from(2),
            CliError::Verification(_) => ExitCode::from(3),
        }
    }

    pub fn data(context: impl std::fmt::Display, err: impl std::fmt::Display) -> Self {
        CliError::Data(format!("{context}: {err}"))
    }
}

impl From<hmd_core::detector::DetectorError> for CliError {
    fn from(e: hmd_core::detector::DetectorError) -> Self {
        match e {
            hmd_core::detector::DetectorError::Config(m) => CliError::Usage(m),
            other => CliError::Data(other.to_string()),
        }
    }
}
