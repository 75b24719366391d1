use std::io;

use thiserror::Error;

use crate::tensor::Shape;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left} vs {right}")]
    ShapeMismatch {
        op: &'static str,
        left: Shape,
        right: Shape,
    },

    #[error("invalid shape {shape} for {op}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Shape,
        reason: String,
    },

    #[error("buffer of length {len} does not match shape {shape}")]
    BufferLength { shape: Shape, len: usize },

    #[error("loss must be a scalar, got shape {0}")]
    NonScalarLoss(Shape),

    #[error("variable does not belong to this tape")]
    ForeignVar,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid network spec: {0}")]
    InvalidSpec(String),

    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },

    #[error("unsupported version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("checkpoint digest mismatch")]
    DigestMismatch,

    #[error("layer {layer}: {reason}")]
    LayerMismatch { layer: String, reason: String },

    #[error("gradient map misaligned with parameters: {0}")]
    GradientMismatch(String),

    #[error("labels must be binary (0 or 1)")]
    NonBinaryLabels,

    #[error("loss became non-finite at iteration {0}; lower the learning rate")]
    Diverged(u64),

    #[error("voxel {0:?} is not covered by any segment")]
    Uncovered([usize; 3]),

    #[error("{0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
