use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("non-finite gradient in parameter block `{param}`")]
    NonFiniteGradient { param: String },

    #[error("tape already consumed by a backward pass")]
    TapeConsumed,

    #[error("index {index} out of range for {what} of size {size}")]
    OutOfRange {
        what: &'static str,
        index: usize,
        size: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("misaligned parallel corpus: {src_lines} source lines vs {tgt_lines} target lines")]
    Misaligned { src_lines: usize, tgt_lines: usize },

    #[error("domain `{domain}` too small: needs {needed} pairs, has {available}")]
    DomainTooSmall {
        domain: String,
        needed: usize,
        available: usize,
    },

    #[error("invalid config at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("missing artifact {path}: run `{stage}` first")]
    MissingArtifact { path: PathBuf, stage: &'static str },

    #[error("artifact {path} was produced by config {found}, current config is {expected}")]
    ConfigHashMismatch {
        path: PathBuf,
        found: String,
        expected: String,
    },

    #[error("meta-training diverged at epoch {epoch}, task {task}: query loss {loss}")]
    Diverged { epoch: usize, task: usize, loss: f64 },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
