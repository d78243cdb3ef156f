//! Error type shared by all modules of the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Two parameter sets disagree on layer names or tensor shapes.
    /// Carries the first offending layer in lexicographic order.
    #[error("parameter sets not aligned at layer '{layer}': {reason}")]
    Misaligned { layer: String, reason: String },

    #[error("mask layer '{layer}' holds {value}, expected exactly 0 or 1")]
    InvalidMaskValue { layer: String, value: f64 },

    #[error("non-finite value produced in layer '{layer}'")]
    NonFinite { layer: String },

    #[error("duplicate layer name '{0}'")]
    DuplicateLayer(String),

    #[error("checkpoint has bad magic bytes (not an MGF1 file)")]
    BadMagic,

    #[error("checkpoint format version {0} is not supported")]
    UnknownVersion(u32),

    #[error("checkpoint header corrupt: {0}")]
    CorruptHeader(String),

    #[error("checkpoint payload length mismatch: expected {expected} bytes, found {found}")]
    PayloadLength { expected: u64, found: u64 },

    #[error("checkpoint tensor '{layer}': {reason}")]
    BadTensorRecord { layer: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("parameters do not match model layout: {0}")]
    LayoutMismatch(String),

    #[error("zero vector has no direction")]
    ZeroVector,

    #[error("matrix is not symmetric positive definite")]
    NotSpd,

    #[error("merge method '{0}' is not supported in this context")]
    UnsupportedMerge(String),
}
