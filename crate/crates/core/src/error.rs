use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("file not found: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {}: {message}", path.display())]
    Parse { path: PathBuf, message: String },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("duplicate annotation for sample {sample_id} by annotator {annotator_id}")]
    DuplicateAnnotation {
        sample_id: String,
        annotator_id: String,
    },

    #[error("annotation references unknown sample {0}")]
    UnknownSample(String),

    #[error("unknown annotator {0}")]
    UnknownAnnotator(String),

    #[error("dataset is empty after filtering: {0}")]
    EmptyDataset(String),

    #[error("bad checkpoint: {0}")]
    Checkpoint(String),

    #[error("training diverged at epoch {epoch}: {detail}")]
    NonFinite { epoch: usize, detail: String },

    #[error("configuration error: {0}")]
    Config(String),
}

impl Error {
    /// Stable machine-readable tag, used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid_input",
            Error::Degenerate(_) => "degenerate",
            Error::MissingFile(_) => "missing_file",
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::DimensionMismatch(_) => "dimension_mismatch",
            Error::DuplicateAnnotation { .. } => "duplicate_annotation",
            Error::UnknownSample(_) => "unknown_sample",
            Error::UnknownAnnotator(_) => "unknown_annotator",
            Error::EmptyDataset(_) => "empty_dataset",
            Error::Checkpoint(_) => "checkpoint",
            Error::NonFinite { .. } => "non_finite",
            Error::Config(_) => "config",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::Io { path, source }
        }
    }

    pub fn parse(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.to_string(),
        }
    }
}
