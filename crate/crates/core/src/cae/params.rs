use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ArchConfig, CaeError};
use crate::scalar::Scalar;

/// One convolution: `weights` is `[out][in][k][k]`, `bias` is `[out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub size: usize,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> ConvLayer<T> {
    pub fn zeros(in_channels: usize, out_channels: usize, size: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            size,
            weights: vec![T::zero(); out_channels * in_channels * size * size],
            bias: vec![T::zero(); out_channels],
        }
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.size * self.size
    }

    fn same_shape(&self, other: &Self) -> bool {
        self.in_channels == other.in_channels
            && self.out_channels == other.out_channels
            && self.size == other.size
            && self.weights.len() == other.weights.len()
            && self.bias.len() == other.bias.len()
    }
}

/// Encoder filter banks with their biases, and decoder filter banks with
/// theirs. `decoder[0]` maps the first encoder stage back to class scores,
/// so its bias holds one entry per class.
///
/// The canonical tensor order (used by checkpoints and gradient checks) is
/// every encoder stage (weights, then bias) from the input inward, followed
/// by every decoder stage (weights, then bias) from the output inward.
#[derive(Debug, Clone, PartialEq)]
pub struct CaeParams<T> {
    pub encoder: Vec<ConvLayer<T>>,
    pub decoder: Vec<ConvLayer<T>>,
}

impl<T: Scalar> CaeParams<T> {
    pub fn zeros(config: &ArchConfig) -> Self {
        let k = config.filter_size;
        let encoder = (0..config.num_layers)
            .map(|l| ConvLayer::zeros(config.encoder_inputs(l), config.filters_per_layer[l], k))
            .collect();
        let decoder = (0..config.num_layers)
            .map(|l| ConvLayer::zeros(config.filters_per_layer[l], config.decoder_outputs(l), k))
            .collect();
        Self { encoder, decoder }
    }

    pub fn zeros_like(&self) -> Self {
        let z = |l: &ConvLayer<T>| ConvLayer::zeros(l.in_channels, l.out_channels, l.size);
        Self { encoder: self.encoder.iter().map(z).collect(), decoder: self.decoder.iter().map(z).collect() }
    }

    pub fn matches(&self, config: &ArchConfig) -> bool {
        self.same_shape(&Self::zeros(config))
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.encoder.len() == other.encoder.len()
            && self.decoder.len() == other.decoder.len()
            && self.encoder.iter().zip(&other.encoder).all(|(a, b)| a.same_shape(b))
            && self.decoder.iter().zip(&other.decoder).all(|(a, b)| a.same_shape(b))
    }

    /// Tensors in canonical order with their names.
    pub fn tensors(&self) -> Vec<(String, &[T])> {
        let mut out = Vec::with_capacity(4 * self.encoder.len());
        for (l, layer) in self.encoder.iter().enumerate() {
            out.push((format!("encoder.{l}.weight"), layer.weights.as_slice()));
            out.push((format!("encoder.{l}.bias"), layer.bias.as_slice()));
        }
        for (l, layer) in self.decoder.iter().enumerate() {
            out.push((format!("decoder.{l}.weight"), layer.weights.as_slice()));
            out.push((format!("decoder.{l}.bias"), layer.bias.as_slice()));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = Vec::with_capacity(4 * self.encoder.len());
        for layer in self.encoder.iter_mut().chain(self.decoder.iter_mut()) {
            out.push(layer.weights.as_mut_slice());
            out.push(layer.bias.as_mut_slice());
        }
        out
    }

    pub fn len(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    /// Every value in canonical order.
    pub fn to_flat(&self) -> Vec<T> {
        self.tensors().into_iter().flat_map(|(_, t)| t.iter().copied()).collect()
    }

    /// Overwrites every value from `flat` (canonical order).
    pub fn assign_flat(&mut self, flat: &[T]) -> Result<(), CaeError> {
        if flat.len() != self.len() {
            return Err(CaeError::ShapeMismatch(format!(
                "{} values for {} parameters",
                flat.len(),
                self.len()
            )));
        }
        let mut rest = flat;
        for t in self.tensors_mut() {
            let (head, tail) = rest.split_at(t.len());
            t.copy_from_slice(head);
            rest = tail;
        }
        Ok(())
    }

    /// Lossless for `f64`; `f32` parameters widen exactly.
    pub fn cast<U: Scalar>(&self) -> CaeParams<U> {
        let c = |l: &ConvLayer<T>| ConvLayer {
            in_channels: l.in_channels,
            out_channels: l.out_channels,
            size: l.size,
            weights: l.weights.iter().map(|v| U::lit(v.as_f64())).collect(),
            bias: l.bias.iter().map(|v| U::lit(v.as_f64())).collect(),
        };
        CaeParams { encoder: self.encoder.iter().map(c).collect(), decoder: self.decoder.iter().map(c).collect() }
    }
}

/// Weights uniform in `[-s, s]` with `s = 1/sqrt(fan_in)`, biases zero.
///
/// Draws are in canonical tensor order from a ChaCha8 stream seeded by
/// `seed`, always sampled in 64-bit so `f32` and `f64` models initialized
/// from one seed agree up to rounding.
pub fn init_params<T: Scalar>(config: &ArchConfig, seed: u64) -> Result<CaeParams<T>, CaeError> {
    config.validate()?;
    let mut params = CaeParams::zeros(config);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for layer in params.encoder.iter_mut().chain(params.decoder.iter_mut()) {
        let s = 1.0 / (layer.fan_in() as f64).sqrt();
        for w in &mut layer.weights {
            *w = T::lit(rng.gen_range(-s..=s));
        }
    }
    Ok(params)
}
