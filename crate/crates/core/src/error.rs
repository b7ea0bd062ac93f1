use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Vector or matrix dimensions disagree.
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("configuration error: {0}")]
    Config(String),
    /// Columns or feature widths disagree with the expected schema.
    #[error("schema error: {0}")]
    Schema(String),
    /// A split or sample asked for more rows of a class than exist.
    #[error("insufficient {class} rows: requested {requested}, available {available}")]
    Capacity {
        class: String,
        requested: usize,
        available: usize,
    },
    #[error("protocol error at {step}: {reason}")]
    Protocol { step: String, reason: String },
    /// A client without labels was asked to take part in a labeled phase.
    #[error("participation error: {0}")]
    Participation(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn protocol(step: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Protocol {
            step: step.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
