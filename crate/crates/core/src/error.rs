use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the core crate.
#[derive(Error, Debug)]
pub enum Error {
    #[error("shape mismatch in {context}: {detail}")]
    ShapeMismatch {
        context: &'static str,
        detail: String,
    },

    #[error("invalid geometry in {context}: {detail}")]
    InvalidGeometry {
        context: &'static str,
        detail: String,
    },

    #[error("invalid argument for {context}: {detail}")]
    InvalidArgument {
        context: &'static str,
        detail: String,
    },

    #[error("index out of range in {context}: {detail}")]
    IndexError {
        context: &'static str,
        detail: String,
    },

    #[error("field type mismatch: {0}")]
    FieldMismatch(String),

    #[error("group mismatch: {0}")]
    GroupMismatch(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("dataset integrity error for sample `{id}`: {detail}")]
    DataIntegrity { id: String, detail: String },

    #[error("unknown driver category `{got}`; valid categories are: {valid}")]
    UnknownCategory { got: String, valid: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error at `{path}`: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("image error at `{path}`: {detail}")]
    Image { path: PathBuf, detail: String },
}

impl Error {
    pub(crate) fn shape(context: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            context,
            detail: detail.into(),
        }
    }

    pub(crate) fn geometry(context: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidGeometry {
            context,
            detail: detail.into(),
        }
    }

    pub(crate) fn arg(context: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArgument {
            context,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
