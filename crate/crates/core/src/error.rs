use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Every failure surfaced by the library. The variant name doubles as the
/// one-word diagnostic category printed by the command-line front end.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parameter error: {0}")]
    Param(String),

    #[error("range error: {0}")]
    Range(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("label error: class {class} at index {index} is outside [0, {num_classes})")]
    Label {
        index: usize,
        class: usize,
        num_classes: usize,
    },

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Short category label used for command-line diagnostics.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Param(_) => "param",
            Error::Range(_) => "range",
            Error::Shape(_) => "shape",
            Error::Data(_) => "data",
            Error::Label { .. } => "label",
            Error::Manifest(_) => "manifest",
            Error::EmptyDataset(_) => "empty-dataset",
            Error::Config(_) => "config",
            Error::Numeric(_) => "numeric",
            Error::Checkpoint(_) => "checkpoint",
            Error::Input(_) => "input",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
