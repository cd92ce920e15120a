use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("document is empty")]
    EmptyDocument,

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("selection error: {0}")]
    Selection(String),

    #[error("non-finite value in `{tensor}`")]
    Numeric { tensor: String },

    #[error("training diverged at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },

    #[error("faithfulness violated for {} document(s): {}", .doc_ids.len(), .doc_ids.join(", "))]
    Faithfulness { doc_ids: Vec<String> },

    #[error("document `{id}`: {source}")]
    Document {
        id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Short machine-readable category, used for the CLI's error JSON and
    /// the C status codes.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::EmptyDocument => "empty_document",
            Error::Parse { .. } => "parse",
            Error::Schema(_) => "schema",
            Error::Config(_) => "config",
            Error::Shape(_) => "shape",
            Error::Selection(_) => "selection",
            Error::Numeric { .. } => "numeric",
            Error::Diverged { .. } => "diverged",
            Error::Faithfulness { .. } => "faithfulness",
            Error::Document { source, .. } | Error::Stage { source, .. } => source.kind(),
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }

    pub(crate) fn in_document(self, id: &str) -> Error {
        Error::Document {
            id: id.to_string(),
            source: Box::new(self),
        }
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
