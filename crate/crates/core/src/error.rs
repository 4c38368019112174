use std::io;

use crate::tensor::Shape;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(thiserror::Error, Debug)]
pub enum Error {
    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: Shape, found: Shape },

    #[error("channel {index} out of range for tensor with {channels} channels")]
    ChannelOutOfRange { index: usize, channels: usize },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("unsupported layer kind [{0}]")]
    UnsupportedLayer(String),

    #[error("truncated weights: needed {needed} more bytes, {available} available")]
    TruncatedWeights { needed: usize, available: usize },

    #[error("weights file has {0} trailing bytes")]
    TrailingBytes(usize),

    #[error("bad weights header: {0}")]
    BadHeader(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("image decode: {0}")]
    Image(String),

    #[error("manifest: {0}")]
    Manifest(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("ratio undefined: no loads recorded")]
    EmptyRecorder,

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
