use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("zero-norm vector passed to {0}")]
    ZeroNorm(&'static str),

    #[error(
        "vocabulary is empty after filtering (min_df={min_df}, max_df_frac={max_df_frac}, \
         max_size={max_size}, documents={num_docs})"
    )]
    EmptyVocabulary {
        min_df: usize,
        max_df_frac: f64,
        max_size: usize,
        num_docs: usize,
    },

    #[error("document {0} has no in-vocabulary tokens")]
    EmptyDocument(String),

    #[error("{path}: {malformed} of {total} lines malformed (first: line {first_line}: {first_reason})")]
    MalformedCorpus {
        path: PathBuf,
        malformed: usize,
        total: usize,
        first_line: usize,
        first_reason: String,
    },

    #[error("{path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("{0}")]
    Data(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("augmentation request for document {doc_id} failed after {attempts} attempts: {reason}")]
    Augmentation {
        doc_id: usize,
        attempts: usize,
        reason: String,
    },

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: u64, detail: String },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// True for errors caused by bad input data rather than numerics or I/O.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::EmptyVocabulary { .. }
                | Error::EmptyDocument(_)
                | Error::MalformedCorpus { .. }
                | Error::Parse { .. }
                | Error::Data(_)
                | Error::Checkpoint(_)
                | Error::Json(_)
                | Error::Io { .. }
        )
    }
}
