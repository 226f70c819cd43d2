use std::path::PathBuf;

use thiserror::Error;

/// Error taxonomy shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Argument outside the operation's domain (zero dimension, size mismatch, ...).
    #[error("domain error: {0}")]
    Domain(String),
    /// Malformed binary or text payload.
    #[error("format error: {0}")]
    Format(String),
    /// Shape rule violated while evaluating a computation graph.
    #[error("graph error at node {node} ({kind}): {msg}")]
    Graph {
        node: usize,
        kind: &'static str,
        msg: String,
    },
    /// Operation invoked in the wrong lifecycle state.
    #[error("state error: {0}")]
    State(String),
    /// Non-finite values encountered during optimization.
    #[error("training error at step {step}: {msg}")]
    Training { step: usize, msg: String },
    /// Metric undefined for the given inputs (e.g. no valid pixels).
    #[error("evaluation error: {0}")]
    Evaluation(String),
    /// Invalid configuration value.
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
