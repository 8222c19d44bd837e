//! Crate-wide error type.

use std::fmt;
use std::io;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by any stage of the pipeline.
#[derive(Debug)]
pub enum Error {
    /// Underlying I/O failure, with the path that was being touched.
    Io { path: String, source: io::Error },

    /// A binary or text format could not be parsed.
    Format { what: String, detail: String },

    /// Tensor/matrix dimensions do not line up.
    ShapeMismatch { context: String, expected: String, got: String },

    /// An argument violated a documented precondition.
    InvalidArgument(String),

    /// A decomposition or solve found fewer usable dimensions than requested.
    RankDeficient { context: String, rank: usize, requested: usize },

    /// An optimization produced a non-finite loss.
    NonFiniteLoss { stage: String, step: usize },

    /// A pipeline stage failed; wraps the underlying error with location info.
    Stage { stage: String, frame: Option<usize>, source: Box<Error> },

    /// Configuration file problem with a line number where known.
    Config { line: Option<usize>, key: String, detail: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(what: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format { what: what.into(), detail: detail.into() }
    }

    pub(crate) fn shape(
        context: impl Into<String>,
        expected: impl fmt::Display,
        got: impl fmt::Display,
    ) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Tag an error with the pipeline stage (and frame) it occurred in.
    pub fn in_stage(self, stage: &str, frame: Option<usize>) -> Self {
        Error::Stage { stage: stage.to_string(), frame, source: Box::new(self) }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Io { path, source } => write!(f, "io error on {path}: {source}"),
            Error::Format { what, detail } => write!(f, "malformed {what}: {detail}"),
            Error::ShapeMismatch { context, expected, got } => {
                write!(f, "shape mismatch in {context}: expected {expected}, got {got}")
            }
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::RankDeficient { context, rank, requested } => {
                write!(f, "{context}: requested {requested} components but sample rank is {rank}")
            }
            Error::NonFiniteLoss { stage, step } => {
                write!(f, "{stage}: loss became non-finite at step {step}")
            }
            Error::Stage { stage, frame, source } => match frame {
                Some(t) => write!(f, "stage {stage} failed at frame {t}: {source}"),
                None => write!(f, "stage {stage} failed: {source}"),
            },
            Error::Config { line, key, detail } => match line {
                Some(n) => write!(f, "config line {n} ({key}): {detail}"),
                None => write!(f, "config key {key}: {detail}"),
            },
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            Error::Stage { source, .. } => Some(source.as_ref()),
            _ => None,
        }
    }
}
