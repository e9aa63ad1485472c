// SPDX-License-Identifier: MIT OR Apache-2.0

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in `{op}`: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("backward: {0}")]
    Backward(String),

    #[error("parameter {index} has no gradient")]
    MissingGrad { index: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("token {token} is outside the vocabulary of size {vocab}")]
    OutOfVocab { token: u32, vocab: usize },

    #[error("optimization diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    #[error("{method} ablation is incompatible with {algorithm}")]
    Incompatible { method: String, algorithm: String },

    #[error("conflicting interventions on {0}")]
    Conflict(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn invalid(detail: impl Into<String>) -> Self {
        Error::InvalidArgument(detail.into())
    }
}
