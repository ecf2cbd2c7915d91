use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    Dimension {
        expected: usize,
        got: usize,
        context: String,
    },

    #[error("duplicate utterance id `{0}`")]
    DuplicateId(String),

    #[error("speaker `{speaker}` appears in both {first} and {second}")]
    SpeakerSpansSplits {
        speaker: String,
        first: String,
        second: String,
    },

    #[error("invalid data: {0}")]
    Invalid(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn dim(expected: usize, got: usize, context: impl Into<String>) -> Self {
        Error::Dimension {
            expected,
            got,
            context: context.into(),
        }
    }

    /// True for NaN/Inf and other floating-point failures.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Numerical(_))
    }
}
