use std::process::ExitCode;

use thiserror::Error;

/// Failure classes, one exit code each.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric error: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        match self {
            Self::Config(_) => ExitCode::from(2),
            Self::Data(_) => ExitCode::from(3),
            Self::Numeric(_) => ExitCode::from(4),
        }
    }
}

impl From<conducive::Error> for CliError {
    fn from(e: conducive::Error) -> Self {
        use conducive::Error as E;
        let msg = e.to_string();
        match e {
            E::InvalidConfig(_)
            | E::InvalidProbabilities(_)
            | E::Unsupported(..)
            | E::EnumerationCap { .. }
            | E::Infeasible(_) => Self::Config(msg),
            E::NonFinite { .. } | E::NotPositiveDefinite(_) => Self::Numeric(msg),
            E::DimensionMismatch { .. }
            | E::OutOfDomain { .. }
            | E::IncompatibleDatum(_)
            | E::EmptyShard(_)
            | E::IndexOutOfRange { .. }
            | E::TooFewSamples { .. }
            | E::Format(_)
            | E::Io(_)
            | E::Csv(_)
            | E::Json(_) => Self::Data(msg),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
