use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::TensorError;
use crate::universe::Pair;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("unknown {kind} id {id} (vocabulary has {size})")]
    UnknownConcept {
        kind: &'static str,
        id: usize,
        size: usize,
    },

    #[error("pair <{}, {}> is not a candidate pair", .0.attr, .0.obj)]
    NotCandidate(Pair),

    #[error("invalid pair universe: {0}")]
    Universe(String),

    #[error("dataset rule `{rule}` violated: {detail}")]
    Dataset { rule: &'static str, detail: String },

    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: malformed JSON: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint does not match: {0}")]
    CheckpointMismatch(String),

    #[error("batch sampling failed: {0}")]
    Sampling(String),

    #[error("non-finite loss at step {step}: {terms}")]
    NonFiniteLoss {
        step: u64,
        terms: String,
        batch: Box<crate::training::TripletBatch>,
    },

    #[error("evaluation: {0}")]
    Evaluation(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
