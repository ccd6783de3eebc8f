use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {left} vs {right} ({context})")]
    Shape {
        left: String,
        right: String,
        context: &'static str,
    },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{file}:{line}: {message}")]
    Parse {
        file: PathBuf,
        line: usize,
        message: String,
    },

    #[error("integrity violation: {0}")]
    Integrity(String),

    #[error("sampling failed: {0}")]
    Sampling(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("inconsistent state: {0}")]
    State(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(left: impl ToString, right: impl ToString, context: &'static str) -> Self {
        Error::Shape {
            left: left.to_string(),
            right: right.to_string(),
            context,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    ///
    /// | code | meaning |
    /// |------|---------|
    /// | 1 | I/O failure |
    /// | 3 | invalid configuration |
    /// | 4 | malformed or inconsistent data |
    /// | 5 | numeric failure during training or evaluation |
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => 1,
            Error::Config(_) => 3,
            Error::Parse { .. } | Error::Integrity(_) | Error::Degenerate(_) | Error::Shape { .. } => 4,
            Error::Numeric(_) | Error::Sampling(_) | Error::State(_) => 5,
        }
    }
}
