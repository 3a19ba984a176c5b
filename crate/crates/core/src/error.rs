use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("nonpositive step: delta = {0}")]
    NonpositiveStep(f64),

    #[error("nonfinite value in {0}")]
    NonFinite(&'static str),

    #[error("reduction exceeds source set: r = {r}, |src| = {src}")]
    ReductionExceedsSource { r: usize, src: usize },

    #[error("unknown {kind} tag {tag:?}")]
    UnknownTag { kind: &'static str, tag: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid merge pairs: {0}")]
    InvalidPairs(String),

    #[error("bad file format: {0}")]
    Format(String),

    #[error("short read")]
    ShortRead,

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
