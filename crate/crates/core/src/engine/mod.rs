//! CNN layers with hand-written forward and backward passes.
//!
//! The backward pass takes a per-layer [`ChannelMask`] and implements
//! structural gradient pruning: gradient rows of inactive output channels
//! are skipped in both backward products rather than computed and zeroed.

mod model;
mod network;
mod params;

use thiserror::Error;

use crate::tensor::TensorError;

pub use model::{LayerKind, LayerSpec, Model, Scope};
pub use network::{
    backprop_flops_by_layer, backward, backward_from, backward_layer, count_backprop_flops, forward,
    loss_gradient, predict, sgd_step, train_step, ForwardPass, LayerFlops,
};
pub(crate) use network::argmax;
pub use params::{ChannelMask, LayerParams, ParamSet};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("layer {layer}: expected shape {expected:?}, got {actual:?}")]
    Shape {
        layer: usize,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("batch has {expected} samples but {actual} labels")]
    LabelCount { expected: usize, actual: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("parameter set does not match the model: {0}")]
    ParamMismatch(String),
    #[error("mask covers {actual} layers, model has {expected} prunable layers")]
    MaskLayers { expected: usize, actual: usize },
    #[error("mask for layer {layer} has {actual} entries, layer has {expected} filters")]
    MaskLength {
        layer: usize,
        expected: usize,
        actual: usize,
    },
    #[error("mask for layer {layer} selects no filters")]
    EmptyMask { layer: usize },
    #[error("backward needs the activations of a forward pass through this model")]
    StalePass,
    #[error("non-finite gradient in layer {layer}")]
    NonFinite { layer: usize },
    #[error("learning rate must be finite and non-negative, got {0}")]
    LearningRate(f64),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}
