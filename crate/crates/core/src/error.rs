use thiserror::Error;

use crate::checkpoint::CheckpointError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch, {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("data length {actual} does not match shape {shape:?}")]
    LengthMismatch { shape: Vec<usize>, actual: usize },

    #[error("mask byte at flat index {index} is not 0 or 1")]
    NonBinaryMask { index: usize },

    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },

    #[error("{op}: input has {actual} channels, expected {expected}")]
    ChannelMismatch {
        op: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("conv2d: degenerate output size for input {input:?}, kernel {kernel:?}, stride {stride}, padding {padding}")]
    DegenerateOutput {
        input: (usize, usize),
        kernel: (usize, usize),
        stride: usize,
        padding: usize,
    },

    #[error("invalid conv spec: {0}")]
    InvalidConvSpec(String),

    #[error("sparsity {0} outside [0, 1)")]
    InvalidSparsity(f64),

    #[error("invalid N:M pattern {n}:{m}")]
    InvalidPattern { n: usize, m: usize },

    #[error("layer `{layer}`: input channels {c_in} not divisible by M = {m}")]
    IndivisibleChannels { layer: String, c_in: usize, m: usize },

    #[error("batch norm in train mode needs at least 2 values per channel, got {0}")]
    BatchTooSmall(usize),

    #[error("{0}: backward called without a cached forward pass")]
    MissingCache(&'static str),

    #[error("batch norm channel {channel}: running_var + eps = {value} is not positive")]
    NonPositiveVariance { channel: usize, value: f64 },

    #[error("invalid batch norm parameters: {0}")]
    InvalidBatchNorm(String),

    #[error("batch norm statistics were never populated; run data through the block before merging")]
    UninitializedStats,

    #[error("layer `{layer}`: extra-branch mask is not a subset of the main mask")]
    SubsetViolation { layer: String },

    #[error("mask violates {n}:{m} at out {out}, group {group}, location ({u}, {v}): {count} nonzero")]
    PatternViolation {
        n: usize,
        m: usize,
        out: usize,
        group: usize,
        u: usize,
        v: usize,
        count: usize,
    },

    #[error("labels out of range: label {label} with {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("learning rate must be positive, got {0}")]
    InvalidLearningRate(f64),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("`{path}`: expected {expected} bytes, found {actual}")]
    ShortFile {
        path: String,
        expected: u64,
        actual: u64,
    },

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("io error on `{path}`: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
