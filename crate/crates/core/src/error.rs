use thiserror::Error;

/// Errors raised by the tensor, layer and training code.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("channel {channel} out of range for map with {channels} channels")]
    ChannelOutOfRange { channel: usize, channels: usize },

    #[error("depth map contains only holes")]
    AllHoles,

    #[error("invalid depth {value} at ({row}, {col}); depths must be strictly positive")]
    InvalidDepth { row: usize, col: usize, value: f64 },

    #[error("pooling window {window} larger than input extent {extent}")]
    WindowTooLarge { window: usize, extent: usize },

    #[error("backward called before forward")]
    NoForwardCache,

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("confusion matrix is empty")]
    EmptyMatrix,

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
