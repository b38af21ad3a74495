use std::path::PathBuf;

use taxolink_numerics::NumericsError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("lookup error: unknown concept `{0}`")]
    Lookup(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("span error: {0}")]
    Span(String),
    /// An argument outside a function's domain, e.g. an empty rank list.
    #[error("domain error: {0}")]
    Domain(String),
    #[error("training error: {0}")]
    Training(String),
    /// A loss or gradient went non-finite.
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error(transparent)]
    Numerics(NumericsError),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Self::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }

    pub fn is_divergence(&self) -> bool {
        matches!(self, Self::Divergence(_))
    }
}

impl From<NumericsError> for Error {
    fn from(e: NumericsError) -> Self {
        match e {
            NumericsError::NonFiniteGradient { name } => {
                Self::Divergence(format!("non-finite gradient for `{name}`"))
            }
            NumericsError::Config(msg) => Self::Config(msg),
            other => Self::Numerics(other),
        }
    }
}
