//! Error type shared by every module of the crate.

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not conform.
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    /// A configuration field is invalid. `field` is the user-facing name.
    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },

    /// A caller violated a documented precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A function evaluation produced a non-finite value.
    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("corrupt dataset: array `{array}`: {message}")]
    CorruptDataset { array: String, message: String },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    /// Training produced a non-finite objective.
    #[error(
        "non-finite objective at step {step} (samples {sample_ids:?}, parameter norm {param_norm:e})"
    )]
    NonFinite {
        step: usize,
        sample_ids: Vec<usize>,
        param_norm: f64,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn corrupt(array: impl Into<String>, message: impl Into<String>) -> Self {
        Error::CorruptDataset {
            array: array.into(),
            message: message.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
