use flowcast::Error;
use thiserror::Error as ThisError;

pub const EXIT_OK: u8 = 0;
pub const EXIT_IO: u8 = 1;
pub const EXIT_VALIDATION: u8 = 2;
pub const EXIT_ESTIMATION: u8 = 3;

#[derive(Debug, ThisError)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Estimation(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::Estimation(_) => EXIT_ESTIMATION,
            CliError::Io(_) => EXIT_IO,
        }
    }

    /// Wraps a library error, prefixing the zone, anchor or file it concerns.
    pub fn with_context(context: &str, err: Error) -> Self {
        let msg = if context.is_empty() {
            err.to_string()
        } else {
            format!("{context}: {err}")
        };
        match err {
            Error::NotConverged { .. }
            | Error::NoConvergence { .. }
            | Error::SingularInformation(_)
            | Error::NonPsdCovariance
            | Error::InfeasibleMargins(_)
            | Error::Separation { .. }
            | Error::RankDeficientDesign(_) => CliError::Estimation(msg),
            Error::Io(_) => CliError::Io(msg),
            _ => CliError::Validation(msg),
        }
    }
}

impl From<Error> for CliError {
    fn from(err: Error) -> Self {
        CliError::with_context("", err)
    }
}

impl From<std::io::Error> for CliError {
    fn from(err: std::io::Error) -> Self {
        CliError::Io(err.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(err: serde_json::Error) -> Self {
        CliError::Io(err.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(err: csv::Error) -> Self {
        CliError::Io(err.to_string())
    }
}
