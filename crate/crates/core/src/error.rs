use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("co-registration error: {0}")]
    CoRegistration(String),

    #[error("ingestion error: {0}")]
    Ingestion(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("resolution error: {0}")]
    Resolution(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("image error at {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable class used as the CLI error prefix.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Shape(_) => "shape",
            Error::CoRegistration(_) => "coregistration",
            Error::Ingestion(_) => "ingestion",
            Error::Numerical(_) => "numerical",
            Error::Resolution(_) => "resolution",
            Error::Checkpoint(_) => "checkpoint",
            Error::Image { .. } => "image",
            Error::Io { .. } => "io",
        }
    }
}
