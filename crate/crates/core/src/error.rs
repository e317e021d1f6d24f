use std::io;
use std::path::PathBuf;

use thiserror::Error;

use crate::corpus::CorpusError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),

    #[error("empty token sequence")]
    EmptySequence,
    #[error("sequence of length {len} exceeds the maximum of {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("sequence of length {len} is too short for next-token prediction")]
    SequenceTooShort { len: usize },
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("input does not {0}")]
    MissingSpecial(&'static str),
    #[error("batch has no maskable tokens")]
    NothingToMask,
    #[error("feature width {got} does not match expected width {expected}")]
    WidthMismatch { expected: usize, got: usize },

    #[error("example lacks context at offset {0}")]
    MissingContext(i32),
    #[error("training requires the target sentence tokens")]
    TargetRequired,
    #[error("target sentence tokens must not be supplied to an evaluation forward pass")]
    TargetInEval,

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("training diverged at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },
    #[error("no examples")]
    NoExamples,

    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
