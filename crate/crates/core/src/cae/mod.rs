//! Convolutional autoencoder for per-pixel classification.
//!
//! Encoder: `L` stages of convolution → ReLU → non-overlapping max pooling.
//! Decoder: the mirror image, each stage unpooling with the encoder's
//! recorded switches and convolving; ReLU between decoder stages and a
//! per-pixel softmax at the output.

mod checkpoint;
pub mod kernels;
mod network;
mod params;
mod prediction;
mod sgd;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointError};
pub use network::{masked_loss, Cae, FeatureMaps, LayerCache, TrainingBatch, TrainingExample};
pub use params::{init_params, CaeParams, ConvLayer};
pub use prediction::{predict_volume, ModelVersion, PredictionMap, ThresholdedPrediction};
pub use sgd::{sgd_step, Sgd, DEFAULT_LEARNING_RATE, DEFAULT_MOMENTUM};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CaeError {
    #[error("invalid architecture: {0}")]
    BadConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite activation in {0}")]
    NonFiniteActivation(&'static str),
    #[error("non-finite parameter update")]
    NonFiniteUpdate,
    #[error("no labeled pixels")]
    NoLabeledPixels,
}

/// Network shape. Defaults to one layer of ten 15×15 filters, 2×2 pooling
/// and three classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub num_layers: usize,
    pub filters_per_layer: Vec<usize>,
    pub filter_size: usize,
    pub pool_dim: usize,
    pub num_classes: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self { num_layers: 1, filters_per_layer: vec![10], filter_size: 15, pool_dim: 2, num_classes: 3 }
    }
}

impl ArchConfig {
    /// Default filter/pool/class settings with `layers` stages of ten filters.
    pub fn with_layers(layers: usize) -> Self {
        Self { num_layers: layers, filters_per_layer: vec![10; layers], ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), CaeError> {
        let bad = |m: String| Err(CaeError::BadConfig(m));
        if self.num_layers == 0 {
            return bad("num_layers must be at least 1".into());
        }
        if self.filters_per_layer.len() != self.num_layers {
            return bad(format!(
                "filters_per_layer has {} entries for {} layers",
                self.filters_per_layer.len(),
                self.num_layers
            ));
        }
        if self.filters_per_layer.contains(&0) {
            return bad("every layer needs at least one filter".into());
        }
        if self.filter_size == 0 || self.filter_size % 2 == 0 {
            return bad(format!("filter_size must be odd, got {}", self.filter_size));
        }
        if self.pool_dim == 0 {
            return bad("pool_dim must be at least 1".into());
        }
        if !(2..=u8::MAX as usize).contains(&self.num_classes) {
            return bad(format!("num_classes must be in 2..=255, got {}", self.num_classes));
        }
        Ok(())
    }

    /// Input channel count of encoder stage `layer`.
    pub fn encoder_inputs(&self, layer: usize) -> usize {
        if layer == 0 {
            1
        } else {
            self.filters_per_layer[layer - 1]
        }
    }

    /// Output channel count of decoder stage `layer` (stage 0 emits classes).
    pub fn decoder_outputs(&self, layer: usize) -> usize {
        if layer == 0 {
            self.num_classes
        } else {
            self.filters_per_layer[layer - 1]
        }
    }
}
