use std::path::PathBuf;

use thiserror::Error;

use crate::losses::LossReport;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("unknown attribute `{0}`")]
    UnknownAttribute(String),

    #[error("unknown region `{0}`")]
    UnknownRegion(String),

    #[error("scorer unavailable: {0}")]
    ScorerUnavailable(String),

    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),

    #[error("{0} is not differentiable; gradient-based procedures need the toy backend or a differentiable adapter")]
    NotDifferentiable(String),

    #[error("non-finite loss at step {step}: {report:?}")]
    NonFiniteLoss { step: u64, report: Box<LossReport> },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {what}: {message}")]
    Format { what: &'static str, message: String },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(what: &'static str, message: impl ToString) -> Self {
        Error::Format {
            what,
            message: message.to_string(),
        }
    }
}
