use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the library can report.
///
/// The variants are coarse on purpose: callers (the CLI in particular) map
/// them onto exit codes, so the category matters more than the payload.
#[derive(Debug, Error)]
pub enum Error {
    #[error("index {index} out of range for size {size}")]
    Range { index: usize, size: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("insufficient coverage for speaker pair ({a}, {b}): {found} answers, need {required}")]
    Coverage {
        a: usize,
        b: usize,
        found: usize,
        required: usize,
    },

    #[error("missing speaker {0}")]
    MissingSpeaker(usize),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by the shape or content of user data rather
    /// than by how the program was invoked.
    pub fn is_data_error(&self) -> bool {
        !matches!(self, Error::Config(_))
    }
}
