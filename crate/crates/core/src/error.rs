use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {layer}: {message}")]
    Shape { layer: String, message: String },

    #[error("state error: {0}")]
    State(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("numeric failure in {location}: {message}")]
    Numeric { location: String, message: String },

    #[error(transparent)]
    Container(#[from] ContainerError),

    #[error("{stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Failures while decoding a serialized model or optimizer checkpoint.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum ContainerError {
    #[error("bad container: missing magic header")]
    BadMagic,
    #[error("unsupported container version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("truncated container: needed {needed} more bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("shape inconsistency in block {block}: expected {expected:?}, found {found:?}")]
    ShapeMismatch { block: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("malformed header: {0}")]
    Header(String),
    #[error("{0} trailing bytes after last block")]
    Trailing(usize),
}

/// Coarse failure class, used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numeric,
}

impl Error {
    pub fn shape(layer: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Shape { layer: layer.into(), message: message.into() }
    }

    pub fn numeric(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Numeric { location: location.into(), message: message.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Wraps the error with the name of the pipeline stage that produced it.
    pub fn in_stage(self, stage: &'static str) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage { stage, source: Box::new(e) },
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) => ErrorClass::Config,
            Error::Numeric { .. } => ErrorClass::Numeric,
            Error::Stage { source, .. } => source.class(),
            Error::Shape { .. } | Error::State(_) | Error::Data(_) | Error::Container(_) | Error::Io { .. } => {
                ErrorClass::Data
            }
        }
    }
}
