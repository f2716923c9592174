use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: field `{field}`: {message}")]
    Config {
        path: PathBuf,
        line: usize,
        field: String,
        message: String,
    },

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid scene: {0}")]
    InvalidScene(String),

    #[error("scene too cluttered to place robot")]
    Placement,

    #[error("non-finite gradient in {0} update")]
    NonFiniteGradient(&'static str),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("report: {0}")]
    Report(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures that should map to the configuration exit code.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Io { .. }
                | Error::Config { .. }
                | Error::InvalidModel(_)
                | Error::InvalidScene(_)
                | Error::Checkpoint(_)
        )
    }
}
