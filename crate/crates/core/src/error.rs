// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module of the crate.

use std::path::PathBuf;

/// Errors produced by relevance computation, adapters and pipelines.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller-supplied value violates an operation's precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A named adapter, plugin or resource is not registered.
    #[error("not found: {0}")]
    NotFound(String),

    /// An adapter returned data that breaks the encoder contract.
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),

    /// A relevance ratio would divide by (near) zero.
    #[error("degenerate relevance: denominator {denominator:e} below threshold")]
    DegenerateRelevance { denominator: f64 },

    /// Input with no usable spread, e.g. a constant array given to Otsu.
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// A prompt did not match the expected editing template.
    #[error("format error: {0}")]
    Format(String),

    /// Optimization produced a non-finite loss; carries the last finite iterate.
    #[error("non-finite loss at step {step}")]
    NumericAbort { step: usize, last_good: Vec<f64> },

    /// Every branch of a lambda sweep aborted.
    #[error("sweep failure: all {0} runs aborted")]
    SweepFailure(usize),

    /// Configuration rejected by schema validation.
    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit status: 2 config, 3 adapter missing, 4 numeric abort, 1 other.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::InvalidArgument(_) | Error::Format(_) | Error::Json(_) => 2,
            Error::NotFound(_) => 3,
            Error::NumericAbort { .. } | Error::SweepFailure(_) => 4,
            _ => 1,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }
}
