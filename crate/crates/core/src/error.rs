use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unsupported audio format in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("corrupt container {path}: {message}")]
    Container { path: PathBuf, message: String },

    /// Failure inside one named pipeline stage.
    #[error("[{stage}] {source}")]
    Stage { stage: String, source: Box<Error> },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

/// Coarse failure classes used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numeric,
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub fn in_stage(self, stage: impl Into<String>) -> Self {
        Error::Stage {
            stage: stage.into(),
            source: Box::new(self),
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Stage { source, .. } => source.class(),
            Error::Config(_) => ErrorClass::Config,
            Error::Numeric(_) => ErrorClass::Numeric,
            Error::Parse { .. }
            | Error::Format { .. }
            | Error::Shape(_)
            | Error::Degenerate(_)
            | Error::UndefinedMetric(_)
            | Error::Container { .. }
            | Error::Io { .. } => ErrorClass::Data,
        }
    }
}
