//! SecciNet: a convolutional classifier with squeeze-and-excitation attention.
//!
//! The default architecture is three Secci blocks (conv 3×3 → BN → ReLU →
//! SE → 2×2 max pool) with 32, 64 and 128 channels, two composite
//! convolutions (conv 3×3 → BN → ReLU) at 128 channels, then
//! Dense 256 → ReLU → Dropout 0.5 → Dense L → Softmax.

mod checkpoint;
pub mod gradcheck;
pub mod layers;
mod optim;
pub mod tensor;
mod train;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{EpochStats, ModelCheckpoint, TrainingMetadata, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use layers::{cross_entropy, softmax_f64, Layer, LayerSpec, LayerWeights};
pub use optim::AdamW;
pub use tensor::{Scalar, Tensor};
pub use train::{predict_probs, train, train_with_progress, TrainConfig};

use crate::imaging::ImagingError;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training diverged (non-finite loss) at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint format version {found} (expected {expected})")]
    UnsupportedVersion { found: u16, expected: u16 },
    #[error("checkpoint file truncated: {0}")]
    Truncated(&'static str),
    #[error("bad checkpoint header: {0}")]
    Header(String),
    #[error(transparent)]
    Data(#[from] ImagingError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    /// Output channels of each Secci block.
    pub block_channels: Vec<usize>,
    /// Output channels of each composite convolution.
    pub composite_channels: Vec<usize>,
    pub kernel: usize,
    pub pool: usize,
    pub se_reduction: usize,
    /// Hidden dense width; 0 removes the hidden dense layer.
    pub dense_hidden: usize,
    pub dropout: f64,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            block_channels: vec![32, 64, 128],
            composite_channels: vec![128, 128],
            kernel: 3,
            pool: 2,
            se_reduction: 16,
            dense_hidden: 256,
            dropout: 0.5,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

impl NetworkConfig {
    /// Layer sequence for `[C, H, W]` inputs and `classes` outputs, ending in softmax.
    pub fn architecture(&self, input: [usize; 3], classes: usize) -> Result<Vec<LayerSpec>, NetError> {
        if classes == 0 {
            return Err(NetError::Config("class count must be positive".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(NetError::Config(format!("kernel {} must be odd", self.kernel)));
        }
        let pad = self.kernel / 2;
        let mut layers = Vec::new();
        let mut ch = input[0];
        let conv = |in_ch, out_ch| LayerSpec::Conv2d {
            in_ch,
            out_ch,
            kernel: self.kernel,
            stride: 1,
            pad,
        };
        let bn = |channels| LayerSpec::BatchNorm {
            channels,
            eps: self.bn_eps,
            momentum: self.bn_momentum,
        };
        for &out in &self.block_channels {
            layers.extend([
                conv(ch, out),
                bn(out),
                LayerSpec::Relu,
                LayerSpec::Se {
                    channels: out,
                    reduction: self.se_reduction,
                },
                LayerSpec::MaxPool { size: self.pool },
            ]);
            ch = out;
        }
        for &out in &self.composite_channels {
            layers.extend([conv(ch, out), bn(out), LayerSpec::Relu]);
            ch = out;
        }
        layers.push(LayerSpec::Flatten);
        let mut shape = input.to_vec();
        for l in &layers {
            l.validate()?;
            shape = l.output_shape(&shape)?;
        }
        let mut features = shape[0];
        if self.dense_hidden > 0 {
            layers.extend([
                LayerSpec::Dense {
                    in_features: features,
                    out_features: self.dense_hidden,
                },
                LayerSpec::Relu,
                LayerSpec::Dropout { p: self.dropout },
            ]);
            features = self.dense_hidden;
        }
        layers.push(LayerSpec::Dense {
            in_features: features,
            out_features: classes,
        });
        layers.push(LayerSpec::Softmax);
        validate_architecture(&layers, &input)?;
        Ok(layers)
    }
}

/// Checks every layer and the shape chain; returns the per-sample output shape.
pub fn validate_architecture(layers: &[LayerSpec], input: &[usize]) -> Result<Vec<usize>, NetError> {
    let mut shape = input.to_vec();
    for l in layers {
        l.validate()?;
        shape = l.output_shape(&shape)?;
    }
    Ok(shape)
}

/// A network in training: layers with gradient buffers.
pub struct Network<T> {
    pub input_shape: [usize; 3],
    pub layers: Vec<Layer<T>>,
}

impl<T: Scalar> Network<T> {
    pub fn new<R: Rng + ?Sized>(architecture: &[LayerSpec], input_shape: [usize; 3], rng: &mut R) -> Result<Self, NetError> {
        validate_architecture(architecture, &input_shape)?;
        Ok(Self {
            input_shape,
            layers: architecture
                .iter()
                .map(|s| Layer::new(LayerWeights::init(s.clone(), rng)))
                .collect(),
        })
    }

    pub fn from_weights(weights: Vec<LayerWeights<T>>, input_shape: [usize; 3]) -> Result<Self, NetError> {
        let specs: Vec<LayerSpec> = weights.iter().map(|w| w.spec.clone()).collect();
        validate_architecture(&specs, &input_shape)?;
        Ok(Self {
            input_shape,
            layers: weights.into_iter().map(Layer::new).collect(),
        })
    }

    pub fn weights(&self) -> Vec<LayerWeights<T>> {
        self.layers.iter().map(|l| l.weights.clone()).collect()
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<(), NetError> {
        if x.shape.len() != 4 || x.shape[1..] != self.input_shape {
            return Err(NetError::Shape(format!(
                "network expects [batch, {}, {}, {}], got {:?}",
                self.input_shape[0], self.input_shape[1], self.input_shape[2], x.shape
            )));
        }
        Ok(())
    }

    /// Layers run during training: everything but a trailing softmax, which
    /// is fused into the loss.
    fn trainable_depth(&self) -> usize {
        match self.layers.last() {
            Some(l) if l.weights.spec == LayerSpec::Softmax => self.layers.len() - 1,
            _ => self.layers.len(),
        }
    }

    /// Training-mode forward pass returning logits.
    pub fn forward_train<R: Rng + ?Sized>(&mut self, x: Tensor<T>, rng: &mut R) -> Result<Tensor<T>, NetError> {
        self.check_input(&x)?;
        let depth = self.trainable_depth();
        Ok(self.layers[..depth].iter_mut().fold(x, |a, l| l.forward(a, rng)))
    }

    /// Backpropagates the logit gradient, accumulating parameter gradients.
    pub fn backward(&mut self, dlogits: Tensor<T>) -> Tensor<T> {
        let depth = self.trainable_depth();
        self.layers[..depth].iter_mut().rev().fold(dlogits, |g, l| l.backward(g))
    }

    pub fn zero_grad(&mut self) {
        self.layers.iter_mut().for_each(Layer::zero_grad);
    }

    /// Inference-mode logits.
    pub fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>, NetError> {
        self.check_input(x)?;
        let depth = self.trainable_depth();
        Ok(infer_layers(self.layers[..depth].iter().map(|l| &l.weights), x))
    }
}

pub(crate) fn infer_layers<'a, T: Scalar>(layers: impl IntoIterator<Item = &'a LayerWeights<T>>, x: &Tensor<T>) -> Tensor<T> {
    let mut it = layers.into_iter();
    let Some(first) = it.next() else { return x.clone() };
    it.fold(first.infer(x), |a, l| l.infer(&a))
}

#[cfg(test)]
mod tests;
