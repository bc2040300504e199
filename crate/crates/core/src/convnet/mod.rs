//! A small trainable convolutional network used as a feature extractor.
//!
//! Layer stack: input, 3x3 convolution (8 filters), batch normalisation,
//! ReLU, 2x2 max pooling, fully connected 400, ReLU, dropout, fully connected
//! to one unit per class, softmax. Features are read from the post-ReLU
//! activations of the 400-unit layer.

pub mod adam;
pub mod checkpoint;
pub mod layers;
mod net;
pub mod train;

use thiserror::Error;

pub use adam::{AdamConfig, AdamState};
pub use net::{
    extract_features, regularized_bce, ConvNetArch, ConvNetModel, DropoutMasks, Forward, Gradients,
    LossOutput, TENSOR_NAMES, WEIGHT_TENSORS,
};
pub use train::{train, EpochRecord, TrainConfig, TrainError, TrainHistory};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConvNetError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite values after layer `{layer}`")]
    NonFinite { layer: &'static str },
    #[error("pixel value {value} at index {index} outside [0, 1]")]
    Pixel { index: usize, value: f64 },
    #[error("model has not been trained")]
    NotTrained,
    #[error("label {label} outside 0..{classes}")]
    Label { label: usize, classes: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("malformed checkpoint at line {line}: {reason}")]
    Checkpoint { line: usize, reason: String },
}

/// Image with values in `[0, 1]`, stored channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<f64>,
    ) -> Result<Self, ConvNetError> {
        if data.len() != height * width * channels {
            return Err(ConvNetError::Shape(format!(
                "{} values for a {height}x{width}x{channels} image",
                data.len()
            )));
        }
        if let Some((index, &value)) = data
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.is_finite() && (0.0..=1.0).contains(*v)))
        {
            return Err(ConvNetError::Pixel { index, value });
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Scales 8-bit grayscale pixels to `[0, 1]` by dividing by 255.
    pub fn from_gray8(height: usize, width: usize, pixels: &[u8]) -> Result<Self, ConvNetError> {
        Self::new(
            height,
            width,
            1,
            pixels.iter().map(|&p| f64::from(p) / 255.0).collect(),
        )
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Nearest 8-bit value per pixel.
    pub fn to_gray8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }
}
