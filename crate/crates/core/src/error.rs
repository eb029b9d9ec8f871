use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the core crate.
///
/// The variants are grouped so that the CLI can map them onto distinct exit
/// codes: configuration problems, numeric failures and I/O failures.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch in {stage}: {detail}")]
    Shape { stage: String, detail: String },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("duration {duration_sec} s is too short: the sync encoder needs at least 16 frames at 25 fps (0.64 s)")]
    TooShort { duration_sec: f64 },

    #[error("input has {got} samples, need at least {need}")]
    InputTooShort { got: usize, need: usize },

    #[error("undefined lag: {0}")]
    UndefinedLag(String),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("checkpoint is truncated: expected {expected} payload bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("malformed file: {0}")]
    Format(String),

    #[error("tensor '{name}' has shape {found:?}, model expects {expected:?}")]
    TensorShape {
        name: String,
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("wav: {0}")]
    Wav(#[from] hound::Error),
}

impl Error {
    pub fn shape(stage: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape {
            stage: stage.into(),
            detail: detail.into(),
        }
    }

    pub fn non_finite(context: impl Into<String>) -> Self {
        Error::NonFinite {
            context: context.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Coarse category used for process exit codes.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_)
            | Error::TooShort { .. }
            | Error::Version { .. }
            | Error::TensorShape { .. }
            | Error::Shape { .. } => ErrorKind::Config,
            Error::NonFinite { .. } | Error::UndefinedLag(_) => ErrorKind::Numeric,
            Error::InputTooShort { .. } => ErrorKind::Config,
            Error::Truncated { .. } | Error::Format(_) | Error::Io { .. } | Error::Wav(_) => {
                ErrorKind::Io
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Numeric,
    Io,
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
