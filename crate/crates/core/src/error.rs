use thiserror::Error;

use crate::tensor::Shape;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: expected shape {expected:?}, got {got:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Shape,
        got: Shape,
    },
    #[error("{op}: expected {expected} input channels, got {got}")]
    ChannelMismatch {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{what}: expected length {expected}, got {got}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{0}: empty spatial extent")]
    EmptySpatial(&'static str),
    #[error("variable does not belong to this tape")]
    NotOnTape,
    #[error("backward needs a (1,1,1,1) output, got {0:?}")]
    NonScalar(Shape),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("{0}")]
    InvalidArgument(String),
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("model is already fused")]
    AlreadyFused,
    #[error("fused execution requested but block {0} has no fused convolution")]
    MissingFusedCache(usize),
    #[error("training-form execution requested but block {0} only holds fused weights")]
    MissingTrainingWeights(usize),
    #[error("invalid configuration: {0}")]
    Config(String),
}

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic bytes {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("unknown mode byte {0}")]
    BadMode(u8),
    #[error("truncated at byte offset {offset}: needed {needed} more bytes")]
    Truncated { offset: usize, needed: usize },
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("invalid tensor name at offset {0}")]
    BadName(usize),
    #[error("tensor `{name}`: {reason}")]
    Architecture { name: String, reason: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("non-finite gradient for parameter {index}")]
    NonFiniteGradient { index: usize },
    #[error(transparent)]
    Degrade(#[from] DegradeError),
    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    Diverged {
        epoch: usize,
        step: usize,
        detail: String,
    },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DegradeError {
    #[error("invalid {what}: {detail}")]
    InvalidParam { what: &'static str, detail: String },
    #[error("input values must lie in [0, 1] ({0})")]
    OutOfRange(&'static str),
    #[error("no clean images supplied")]
    EmptyInput,
}
