use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: {dim} mismatch (expected {expected}, found {found})")]
    ShapeMismatch {
        op: &'static str,
        dim: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid shape {0:?}: every dimension must be at least 1")]
    InvalidShape([usize; 4]),

    #[error("data length {found} does not match shape volume {expected}")]
    DataLength { expected: usize, found: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("batch norm in train mode needs at least 2 values per channel, got {0}")]
    BatchTooSmall(usize),

    #[error("time {0} outside the integration horizon [0, 1]")]
    TimeOutOfRange(f64),

    #[error("loss node must hold a single scalar, found {0} values")]
    NonScalarLoss(usize),

    #[error("node {0} does not belong to this tape")]
    DanglingNode(usize),

    #[error("channel mismatch: model expects {expected} image channels, got {found}")]
    ChannelMismatch { expected: usize, found: usize },

    #[error("image is {height}x{width}, patch size {required} needs at least {required}x{required}")]
    ImageTooSmall {
        required: usize,
        height: usize,
        width: usize,
    },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("need at least {required} images, got {found}")]
    NotEnoughImages { required: usize, found: usize },

    #[error("non-finite loss {value} at step {step}")]
    NonFiniteLoss { step: u64, value: f64 },

    #[error("optimizer moments not initialised for {0} parameters")]
    UninitializedMoments(usize),

    #[error("malformed image header: {0}")]
    MalformedHeader(String),

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },

    #[error("unsupported maxval {0} (only 255 is supported)")]
    UnsupportedMaxval(u32),

    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),

    #[error("bad checkpoint magic {0:?}")]
    BadMagic([u8; 4]),

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("checkpoint checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    ChecksumMismatch { stored: u32, computed: u32 },

    #[error("checkpoint tensor `{name}`: {reason}")]
    CheckpointTensor { name: String, reason: String },

    #[error("checkpoint truncated while reading {0}")]
    CheckpointTruncated(&'static str),

    #[error("{path}: {source}")]
    Path {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, dim: &'static str, expected: usize, found: usize) -> Self {
        Error::ShapeMismatch {
            op,
            dim,
            expected,
            found,
        }
    }

    pub(crate) fn at_path(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Path {
            path: path.into(),
            source,
        }
    }
}
