use std::io;

use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("zero dimension in shape {0:?}")]
    ZeroDimension(Vec<usize>),

    #[error("data length {actual} does not match shape {shape:?} (expected {expected})")]
    LengthMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite value {value} at flat index {index}")]
    NonFinite { index: usize, value: f64 },

    #[error("label {label} at flat index {index} out of range for {num_classes} classes")]
    LabelOutOfRange {
        index: usize,
        label: u32,
        num_classes: usize,
    },

    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u8),

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("dim overflow: {0:?} does not fit in memory")]
    DimOverflow([u32; 3]),

    #[error("trailing data: {0} bytes after tensor payload")]
    TrailingData(usize),

    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),

    #[error("invalid pool config: {0}")]
    InvalidConfig(String),

    #[error("wrong pooling mode: expected {expected}, got {actual}")]
    WrongMode {
        expected: &'static str,
        actual: &'static str,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("non-finite gradient in layer {layer}")]
    NonFiniteGradient { layer: String },

    #[error("stale cache: built for params version {cache}, params are at version {params}")]
    StaleCache { cache: u64, params: u64 },

    #[error("malformed file {path}: {reason}")]
    Malformed { path: String, reason: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
