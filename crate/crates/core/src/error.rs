use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, MqaError>;

#[derive(Debug, Error)]
pub enum MqaError {
    #[error("shape mismatch in {op}: {lhs} vs {rhs}")]
    Shape {
        op: &'static str,
        lhs: String,
        rhs: String,
    },

    #[error("token id {id} out of range for vocabulary of size {n}")]
    TokenOutOfRange { id: usize, n: usize },

    #[error("non-finite value in {what} at step {step}")]
    NonFinite { what: &'static str, step: usize },

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("no image feature for image id `{0}`")]
    MissingImage(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("unrecognized question template: `{0}`")]
    UnknownTemplate(String),

    #[error("question cannot be answered from the scene: {0}")]
    Unanswerable(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("forward trace does not match parameters: {0}")]
    TraceMismatch(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl MqaError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MqaError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: impl ToString, rhs: impl ToString) -> Self {
        MqaError::Shape {
            op,
            lhs: lhs.to_string(),
            rhs: rhs.to_string(),
        }
    }
}
