//! Kernel point convolution with density normalization, the encoder/decoder
//! network built on it, and its weight file.

mod kernel;
mod layer;
mod model;
mod weights;

use thiserror::Error;

use crate::neighborhood::NeighborhoodError;

pub use kernel::{
    correlation, kernel_dispositions, kernel_dispositions_with, KernelLayout,
    DEFAULT_KERNEL_SIZE, DEFAULT_SIGMA_DIVISOR, SUPPORTED_KERNEL_SIZES,
};
pub use layer::{kpconv_apply, layer_forward, Affine, ConvLayer, UnaryLayer};
pub use model::{
    network_forward, KpConvModel, ModelConfig, ResnetBlock, DEFAULT_RADIUS_FACTOR,
    DESCRIPTOR_DIM, ENCODER_CHANNELS,
};
pub use weights::{
    load_weights, model_from_bytes, model_to_bytes, save_weights, WeightsError, MAGIC, VERSION,
};

#[derive(Debug, Error, PartialEq)]
pub enum KpConvError {
    #[error("no kernel disposition shipped for K = {0}")]
    UnsupportedKernelSize(usize),
    #[error("invalid kernel: {0}")]
    InvalidKernel(String),
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Neighborhood(#[from] NeighborhoodError),
}
