use std::collections::BTreeMap;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A row that has to be normalized has zero length.
    #[error("degenerate input: row {row} has zero L2 norm")]
    DegenerateRow { row: usize },

    #[error("invalid parameter `{name}`: {reason}")]
    Parameter { name: &'static str, reason: String },

    /// A caller broke a documented precondition (mixed networks, bad indices, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("shape mismatch in {op}: expected {expected:?}, got {actual:?}")]
    Shape {
        op: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("class-aware sampling needs {needed} classes with at least two samples, only {available} available (short by {})", needed - available)]
    InsufficientClasses { needed: usize, available: usize },

    #[error("memory bank retrieval failed for label {label}: {detail}")]
    Retrieval { label: usize, detail: String },

    #[error("invalid cohort spec: {0}")]
    Spec(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("finite-difference oracle failed: {0}")]
    Oracle(String),

    #[error("non-finite loss at epoch {epoch}, step {step} (terms: {terms:?})")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        batch: Vec<usize>,
        terms: BTreeMap<String, f64>,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::Parameter {
            name,
            reason: reason.into(),
        }
    }
}
