use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A value is outside its allowed range or otherwise malformed.
    #[error("invalid {field}: {message}")]
    Validation { field: String, message: String },

    /// Missing, duplicate or inconsistent entries in a collection.
    #[error("{0}")]
    Structure(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },

    #[error("image {}: {message}", path.display())]
    Image { path: PathBuf, message: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("ICC undefined: {0}")]
    UndefinedIcc(String),
}

impl Error {
    pub fn validation(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input (config, spec, manifest
    /// contents) rather than a failure while doing the work.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Validation { .. } | Error::Parse { .. } | Error::Structure(_)
        )
    }
}
