use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid or inconsistent configuration; `field` names the offending key.
    #[error("configuration error in `{field}`: {message}")]
    Config { field: String, message: String },

    /// Not enough examples to satisfy a request.
    #[error("capacity error for {what}: {message}")]
    Capacity { what: String, message: String },

    /// A caller broke a documented precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A loss or parameter became non-finite.
    #[error("numerical error in {term}: {message}")]
    Numerical { term: String, message: String },

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image decode error at {path}: {message}")]
    Image { path: PathBuf, message: String },
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn capacity(what: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Capacity {
            what: what.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable category used in structured error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config { .. } => "config",
            Error::Capacity { .. } => "capacity",
            Error::Contract(_) => "contract",
            Error::Numerical { .. } => "numerical",
            Error::Format(_) => "format",
            Error::Io { .. } => "io",
            Error::Image { .. } => "image",
        }
    }
}
