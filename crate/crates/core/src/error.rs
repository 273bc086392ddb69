//! Crate-wide error type.

use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path} line {line}: {msg}")]
    MalformedLine {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("infeasible generator config: {0}")]
    InfeasibleConfig(String),

    #[error("surface form {0:?} collides with a reserved special token")]
    ReservedToken(String),

    #[error("token not in vocabulary: {0:?}")]
    OutOfVocab(String),

    #[error("unbalanced step delimiters in chain: {0}")]
    UnbalancedDelimiters(String),

    #[error("nested step delimiters in chain")]
    NestedDelimiters,

    #[error("chain contains no step segments")]
    NoSteps,

    #[error("bad reasoning step {step:?}: {msg}")]
    BadStep { step: String, msg: String },

    #[error("prior has empty support")]
    EmptySupport,

    #[error("step {index}: {source}")]
    AtStep {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("no priors found for instance {index}")]
    MissingPriors { index: usize },

    #[error("non-finite {what} at epoch {epoch}, batch {batch}")]
    NonFinite {
        what: String,
        epoch: usize,
        batch: usize,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{what}: expected length {expected}, got {got}")]
    LengthMismatch {
        what: String,
        expected: usize,
        got: usize,
    },
}

impl Error {
    pub(crate) fn at_step(self, index: usize) -> Error {
        Error::AtStep {
            index,
            source: Box::new(self),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Error {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
