use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown part `{0}`")]
    UnknownPart(String),
    #[error("degenerate geometry: {0}")]
    Degenerate(String),
    #[error("part `{0}` has no connection point")]
    NoConnectionPoint(String),
    #[error("part `{part}` could not be broken within {attempts} attempts")]
    Unbreakable { part: String, attempts: usize },
    #[error("swap of part `{part}` is a no-op (Hausdorff distance {distance:.4})")]
    NoOpSwap { part: String, distance: f64 },
    #[error("removing `{0}` would leave fewer than two parts")]
    TooFewParts(String),
    #[error("depth must be positive, got {0}")]
    NonPositiveDepth(f64),
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),
    #[error("format error: {0}")]
    Format(String),
    #[error("truncated payload: {0}")]
    Truncated(String),
    #[error("anchor {0} has no negatives")]
    EmptyNegatives(usize),
    #[error("undefined metric: {0}")]
    Undefined(String),
    #[error("manifest violation: {0}")]
    Validation(String),
    #[error("dataset generation stalled: {0}")]
    Generation(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape { op, detail: detail.into() }
}
