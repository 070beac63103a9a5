//! Error type shared by every module in the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AsegError {
    #[error("invalid retina config: {0}")]
    InvalidRetinaConfig(String),

    #[error("glimpse out of bounds: top={top} left={left} size={size} image={height}x{width}")]
    GlimpseOutOfBounds {
        top: usize,
        left: usize,
        size: usize,
        height: usize,
        width: usize,
    },

    #[error("glimpse position not 4-aligned: top={top} left={left}")]
    MisalignedGlimpse { top: usize, left: usize },

    #[error("memory size {height}x{width} not divisible by 16")]
    InvalidMemorySize { height: usize, width: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("missing {side} file for stem '{stem}'")]
    MissingPair { stem: String, side: String },

    #[error("label value {value} out of range for {num_classes} classes in '{file}'")]
    LabelOutOfRange {
        value: u32,
        num_classes: usize,
        file: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checkpoint architecture mismatch: {0}")]
    ArchMismatch(String),

    #[error("non-finite loss in stream '{stream}' at step {step}")]
    NonFiniteLoss { stream: String, step: usize },

    #[error("trace does not match checkpoint: {0}")]
    TraceMismatch(String),

    #[error("render error: {0}")]
    Render(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(String),
}

impl From<image::ImageError> for AsegError {
    fn from(e: image::ImageError) -> Self {
        AsegError::Image(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, AsegError>;
