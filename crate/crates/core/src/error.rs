//! Error type shared by all core modules.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    /// Incompatible tensor shapes, naming both sides.
    #[error("dimension mismatch in {op}: {left} vs {right}")]
    Dimension {
        op: &'static str,
        left: String,
        right: String,
    },

    /// An index (token id, label id, embedding row) outside its valid range.
    #[error("{what} index {index} out of range (bound {bound})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    /// API misuse: empty dataset, mismatched argument lengths, consumed tape, ...
    #[error("usage error: {0}")]
    Usage(String),

    /// Invalid model or trainer configuration.
    #[error("config error: {0}")]
    Config(String),

    /// CoNLL input that cannot be parsed.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// A label not present in the task's label scheme.
    #[error("unknown label {0:?}")]
    UnknownLabel(String),

    /// Invalid synthetic-task specification.
    #[error("synth spec error: {0}")]
    Spec(String),

    /// A snapshot that cannot be applied to the live model.
    #[error("consolidation error for parameter {param:?}: {message}")]
    Consolidation { param: String, message: String },

    /// Training produced a non-finite loss.
    #[error("training diverged at epoch {epoch}, step {step}: loss is not finite")]
    Divergence { epoch: usize, step: usize },
}

pub type Result<T> = std::result::Result<T, CoreError>;

impl CoreError {
    pub(crate) fn dimension(op: &'static str, left: impl Into<String>, right: impl Into<String>) -> Self {
        CoreError::Dimension {
            op,
            left: left.into(),
            right: right.into(),
        }
    }

    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        CoreError::Usage(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        CoreError::Config(msg.into())
    }
}
