use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("loss became non-finite at unroll step {step}")]
    NonFiniteLoss { step: usize },

    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("backward: variable {0} does not require gradients")]
    NoGradient(usize),

    #[error(
        "backward: the graph was truncated at node {node} by a release retain policy; \
         differentiating through optimizer updates needs RetainPolicy::Keep"
    )]
    GraphTruncated { node: usize },

    #[error("unknown variable id {0}")]
    UnknownVariable(usize),

    #[error("parameter `{name}`: {reason}")]
    Parameter { name: String, reason: String },

    #[error("mask does not match model: {0}")]
    MaskMismatch(String),

    #[error("{path}: malformed file at byte {offset}: {reason}")]
    Format { path: PathBuf, offset: u64, reason: String },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("refusing to build a mask that retains no entries (density {density}, {entries} entries)")]
    EmptyMask { density: f64, entries: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { context: context.into(), source }
    }
}
