use super::kernels::{self, Extent, Padded};
use super::params::init_params;
use super::prediction::{ModelVersion, PredictionMap};
use super::{ArchConfig, CaeError, CaeParams};
use crate::scalar::Scalar;

/// Everything the backward pass needs from one encoder stage.
#[derive(Debug, Clone)]
pub struct LayerCache<T> {
    /// Extent of the stage input (and of its activations).
    pub extent: Extent,
    /// Stage input with a zero border of `filter_size / 2`.
    pub padded_input: Padded<T>,
    /// Post-ReLU feature maps before pooling.
    pub activations: Vec<T>,
    pub pooled: Vec<T>,
    /// In-plane linear index of each pooled cell's maximum.
    pub switches: Vec<u32>,
}

/// Intermediate results of one forward pass.
#[derive(Debug, Clone)]
pub struct FeatureMaps<T> {
    pub encoder: Vec<LayerCache<T>>,
    /// Post-ReLU outputs of decoder stages `1..L`; entry `j` is stage `j + 1`.
    pub decoder: Vec<Vec<T>>,
    /// Pre-softmax class scores, `[class][y][x]`.
    pub logits: Vec<T>,
    pub extent: Extent,
}

impl<T> FeatureMaps<T> {
    /// Input to decoder stage `l`.
    fn decoder_input(&self, l: usize) -> &[T] {
        if l + 1 == self.encoder.len() {
            &self.encoder[l].pooled
        } else {
            &self.decoder[l]
        }
    }
}

/// A normalized image with its partial labels (`0` = unlabeled).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample<T> {
    pub image: Vec<T>,
    pub labels: Vec<u8>,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingBatch<T> {
    pub examples: Vec<TrainingExample<T>>,
}

impl<T> TrainingBatch<T> {
    pub fn labeled_pixels(&self) -> usize {
        self.examples.iter().map(|e| e.labels.iter().filter(|&&l| l != 0).count()).sum()
    }
}

/// Architecture plus parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Cae<T> {
    config: ArchConfig,
    params: CaeParams<T>,
}

impl<T: Scalar> Cae<T> {
    /// Fresh model from [`init_params`].
    pub fn new(config: ArchConfig, seed: u64) -> Result<Self, CaeError> {
        let params = init_params(&config, seed)?;
        Ok(Self { config, params })
    }

    pub fn from_params(config: ArchConfig, params: CaeParams<T>) -> Result<Self, CaeError> {
        config.validate()?;
        if !params.matches(&config) {
            return Err(CaeError::ShapeMismatch("parameters do not match architecture".into()));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ArchConfig {
        &self.config
    }

    pub fn params(&self) -> &CaeParams<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut CaeParams<T> {
        &mut self.params
    }

    pub fn into_params(self) -> CaeParams<T> {
        self.params
    }

    pub fn forward(
        &self,
        image: &[T],
        width: usize,
        height: usize,
    ) -> Result<(FeatureMaps<T>, PredictionMap<T>), CaeError> {
        let maps = self.forward_maps(image, width, height)?;
        let pred = PredictionMap::from_logits(
            &maps.logits,
            self.config.num_classes,
            width,
            height,
            ModelVersion::default(),
        );
        Ok((maps, pred))
    }

    /// Class distribution only.
    pub fn predict(&self, image: &[T], width: usize, height: usize, version: ModelVersion) -> Result<PredictionMap<T>, CaeError> {
        let maps = self.forward_maps(image, width, height)?;
        Ok(PredictionMap::from_logits(&maps.logits, self.config.num_classes, width, height, version))
    }

    fn forward_maps(&self, image: &[T], width: usize, height: usize) -> Result<FeatureMaps<T>, CaeError> {
        if width == 0 || height == 0 || image.len() != width * height {
            return Err(CaeError::ShapeMismatch(format!(
                "image of {} pixels for {width}x{height}",
                image.len()
            )));
        }
        let k = self.config.filter_size;
        let r = k / 2;
        let p = self.config.pool_dim;
        let top = Extent::new(height, width);

        let mut encoder = Vec::with_capacity(self.config.num_layers);
        let mut extent = top;
        let mut input = image.to_vec();
        for layer in &self.params.encoder {
            let padded_input = Padded::from_planes(&input, layer.in_channels, extent, r);
            let mut activations =
                kernels::conv_forward(&padded_input, &layer.weights, Some(&layer.bias), layer.out_channels, k);
            kernels::relu_in_place(&mut activations);
            if activations.iter().any(|v| !v.is_finite()) {
                return Err(CaeError::NonFiniteActivation("encoder"));
            }
            let (pooled, switches) = kernels::max_pool(&activations, layer.out_channels, extent, p);
            input = pooled.clone();
            encoder.push(LayerCache { extent, padded_input, activations, pooled, switches });
            extent = extent.pooled(p);
        }

        let layers = self.config.num_layers;
        let mut decoder = vec![Vec::new(); layers - 1];
        let mut logits = Vec::new();
        for l in (0..layers).rev() {
            let layer = &self.params.decoder[l];
            let cache = &encoder[l];
            let source = if l + 1 == layers { &cache.pooled } else { &decoder[l] };
            let unpooled = kernels::unpool_padded(source, &cache.switches, layer.in_channels, cache.extent, r);
            let mut out = kernels::conv_forward(&unpooled, &layer.weights, Some(&layer.bias), layer.out_channels, k);
            if l > 0 {
                kernels::relu_in_place(&mut out);
                decoder[l - 1] = out;
            } else {
                logits = out;
            }
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(CaeError::NonFiniteActivation("decoder"));
        }
        Ok(FeatureMaps { encoder, decoder, logits, extent: top })
    }

    /// Mean masked cross-entropy over the labeled pixels of `labels` and its
    /// gradient with respect to every parameter.
    pub fn backward(&self, maps: &FeatureMaps<T>, labels: &[u8]) -> Result<(T, CaeParams<T>), CaeError> {
        let n = count_labeled(labels);
        if n == 0 {
            return Err(CaeError::NoLabeledPixels);
        }
        let mut grads = self.params.zeros_like();
        let sum = self.accumulate_gradients(maps, labels, T::lit(n as f64), &mut grads)?;
        Ok((sum / T::lit(n as f64), grads))
    }

    /// Forward and backward on one labeled image.
    pub fn loss_and_gradients(
        &self,
        image: &[T],
        labels: &[u8],
        width: usize,
        height: usize,
    ) -> Result<(T, CaeParams<T>), CaeError> {
        let maps = self.forward_maps(image, width, height)?;
        self.backward(&maps, labels)
    }

    /// Loss and gradient of the mean cross-entropy over every labeled pixel
    /// of the batch.
    pub fn batch_gradients(&self, batch: &TrainingBatch<T>) -> Result<(T, CaeParams<T>), CaeError> {
        let n = batch.labeled_pixels();
        if n == 0 {
            return Err(CaeError::NoLabeledPixels);
        }
        let norm = T::lit(n as f64);
        let mut grads = self.params.zeros_like();
        let mut sum = T::zero();
        for ex in &batch.examples {
            if count_labeled(&ex.labels) == 0 {
                continue;
            }
            let maps = self.forward_maps(&ex.image, ex.width, ex.height)?;
            sum += self.accumulate_gradients(&maps, &ex.labels, norm, &mut grads)?;
        }
        Ok((sum / norm, grads))
    }

    /// Mean masked cross-entropy computed from logits (numerically stable).
    pub fn loss(&self, image: &[T], labels: &[u8], width: usize, height: usize) -> Result<T, CaeError> {
        let n = count_labeled(labels);
        if n == 0 {
            return Err(CaeError::NoLabeledPixels);
        }
        let maps = self.forward_maps(image, width, height)?;
        let c = self.config.num_classes;
        check_labels(labels, maps.extent.len(), c)?;
        let hw = maps.extent.len();
        let mut sum = T::zero();
        for (pix, &label) in labels.iter().enumerate() {
            if label != 0 {
                let (lse, _) = log_sum_exp(&maps.logits, pix, hw, c);
                sum += lse - maps.logits[(label as usize - 1) * hw + pix];
            }
        }
        Ok(sum / T::lit(n as f64))
    }

    /// Adds `d(sum of pixel losses)/d(theta) / norm` into `grads` and
    /// returns the un-normalized loss sum.
    fn accumulate_gradients(
        &self,
        maps: &FeatureMaps<T>,
        labels: &[u8],
        norm: T,
        grads: &mut CaeParams<T>,
    ) -> Result<T, CaeError> {
        let c = self.config.num_classes;
        let k = self.config.filter_size;
        let hw = maps.extent.len();
        check_labels(labels, hw, c)?;

        let mut grad = vec![T::zero(); c * hw];
        let mut sum = T::zero();
        for (pix, &label) in labels.iter().enumerate() {
            if label == 0 {
                continue;
            }
            let truth = label as usize - 1;
            let (lse, _) = log_sum_exp(&maps.logits, pix, hw, c);
            sum += lse - maps.logits[truth * hw + pix];
            for class in 0..c {
                let prob = (maps.logits[class * hw + pix] - lse).exp();
                let target = if class == truth { T::one() } else { T::zero() };
                grad[class * hw + pix] = (prob - target) / norm;
            }
        }

        let layers = self.config.num_layers;
        for l in 0..layers {
            let layer = &self.params.decoder[l];
            let cache = &maps.encoder[l];
            let g = &mut grads.decoder[l];
            let source = maps.decoder_input(l);
            kernels::unpooled_weight_grad(
                source,
                &cache.switches,
                layer.in_channels,
                cache.extent,
                &grad,
                layer.out_channels,
                k,
                &mut g.weights,
                &mut g.bias,
            );
            grad = kernels::conv_input_grad_at_switches(
                &grad,
                layer.out_channels,
                cache.extent,
                &layer.weights,
                layer.in_channels,
                k,
                source,
                &cache.switches,
            );
        }
        for l in (0..layers).rev() {
            let layer = &self.params.encoder[l];
            let cache = &maps.encoder[l];
            let g = &mut grads.encoder[l];
            kernels::switch_weight_grad(
                &cache.padded_input,
                &grad,
                &cache.pooled,
                &cache.switches,
                layer.out_channels,
                k,
                &mut g.weights,
                &mut g.bias,
            );
            if l > 0 {
                let grad_pre =
                    kernels::scatter_active(&grad, &cache.pooled, &cache.switches, layer.out_channels, cache.extent);
                grad = kernels::conv_input_grad(
                    &grad_pre,
                    layer.out_channels,
                    cache.extent,
                    &layer.weights,
                    layer.in_channels,
                    k,
                );
            }
        }
        Ok(sum)
    }
}

fn count_labeled(labels: &[u8]) -> usize {
    labels.iter().filter(|&&l| l != 0).count()
}

fn check_labels(labels: &[u8], pixels: usize, classes: usize) -> Result<(), CaeError> {
    if labels.len() != pixels {
        return Err(CaeError::ShapeMismatch(format!("{} labels for {pixels} pixels", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize > classes) {
        return Err(CaeError::ShapeMismatch(format!("label {bad} exceeds {classes} classes")));
    }
    Ok(())
}

/// `(log Σ_c exp(z_c), max_c z_c)` for one pixel of `[class][pixel]` logits.
#[inline]
fn log_sum_exp<T: Scalar>(logits: &[T], pix: usize, hw: usize, classes: usize) -> (T, T) {
    let mut m = logits[pix];
    for c in 1..classes {
        m = m.max(logits[c * hw + pix]);
    }
    let mut s = T::zero();
    for c in 0..classes {
        s += (logits[c * hw + pix] - m).exp();
    }
    (m + s.ln(), m)
}

/// Mean of `-ln p(true class)` over pixels with a nonzero label.
///
/// Probabilities are floored at the smallest positive normal value so a
/// confidently wrong pixel yields a large finite loss.
pub fn masked_loss<T: Scalar>(pred: &PredictionMap<T>, labels: &[u8]) -> Result<T, CaeError> {
    let hw = pred.width() * pred.height();
    check_labels(labels, hw, pred.num_classes())?;
    let mut n = 0usize;
    let mut sum = T::zero();
    for (pix, &label) in labels.iter().enumerate() {
        if label != 0 {
            n += 1;
            let p = pred.probability(label, pix).max(T::min_positive_value());
            sum -= p.ln();
        }
    }
    if n == 0 {
        return Err(CaeError::NoLabeledPixels);
    }
    Ok(sum / T::lit(n as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ArchConfig {
        ArchConfig { num_layers: 1, filters_per_layer: vec![2], filter_size: 3, pool_dim: 2, num_classes: 3 }
    }

    #[test]
    fn identity_kernels_pass_relu_input_through() {
        let cfg = ArchConfig { num_layers: 1, filters_per_layer: vec![1], filter_size: 3, pool_dim: 1, num_classes: 2 };
        let mut params = CaeParams::<f64>::zeros(&cfg);
        params.encoder[0].weights[4] = 1.0;
        params.decoder[0].weights[4] = 1.0;
        let cae = Cae::from_params(cfg, params).unwrap();
        let image = [0.5, -0.25, 0.0, 1.5, -2.0, 0.75];
        let (maps, _) = cae.forward(&image, 3, 2).unwrap();
        let relu: Vec<f64> = image.iter().map(|v| v.max(0.0)).collect();
        assert_eq!(&maps.logits[..6], relu.as_slice());
        assert!(maps.logits[6..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_weights_give_uniform_distribution() {
        let cae = Cae::from_params(tiny(), CaeParams::<f64>::zeros(&tiny())).unwrap();
        let image: Vec<f64> = (0..64).map(|i| i as f64 / 64.0).collect();
        let (_, pred) = cae.forward(&image, 8, 8).unwrap();
        for pix in 0..64 {
            for class in 1..=3 {
                assert!((pred.probability(class, pix) - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn output_extent_matches_input_for_odd_sizes() {
        let cae = Cae::<f64>::new(ArchConfig { num_layers: 2, filters_per_layer: vec![3, 2], ..tiny() }, 1).unwrap();
        let image = vec![0.3; 7 * 5];
        let (maps, pred) = cae.forward(&image, 7, 5).unwrap();
        assert_eq!(maps.logits.len(), 3 * 35);
        assert_eq!((pred.width(), pred.height()), (7, 5));
        assert_eq!(maps.encoder[1].extent, Extent::new(3, 4));
    }

    #[test]
    fn rejects_wrong_image_size() {
        let cae = Cae::<f64>::new(tiny(), 1).unwrap();
        assert!(matches!(cae.forward(&[0.0; 10], 4, 4), Err(CaeError::ShapeMismatch(_))));
    }

    #[test]
    fn non_finite_input_is_reported() {
        let cae = Cae::<f64>::new(tiny(), 1).unwrap();
        let mut image = vec![0.1; 16];
        image[5] = f64::INFINITY;
        assert!(matches!(cae.forward(&image, 4, 4), Err(CaeError::NonFiniteActivation(_))));
    }

    #[test]
    fn masked_loss_edge_cases() {
        let cae = Cae::from_params(tiny(), CaeParams::<f64>::zeros(&tiny())).unwrap();
        let (_, pred) = cae.forward(&[0.0; 16], 4, 4).unwrap();
        let mut labels = vec![0u8; 16];
        assert_eq!(masked_loss(&pred, &labels), Err(CaeError::NoLabeledPixels));
        labels[3] = 2;
        labels[9] = 1;
        assert!((masked_loss(&pred, &labels).unwrap() - 3f64.ln()).abs() < 1e-15);

        let certain = PredictionMap::from_probabilities(vec![0.0, 1.0, 0.0], 3, 1, 1, ModelVersion::default());
        assert_eq!(masked_loss(&certain, &[2]).unwrap(), 0.0);
    }

    #[test]
    fn perfect_predictions_have_zero_gradient() {
        // Every labeled pixel already predicted with probability one: with
        // saturated class biases the softmax rounds to an exact one-hot.
        let mut params = CaeParams::<f64>::zeros(&tiny());
        params.decoder[0].bias = vec![-1e3, 1e3, -1e3];
        let cae = Cae::from_params(tiny(), params).unwrap();
        let image: Vec<f64> = (0..64).map(|i| (i % 7) as f64 / 7.0).collect();
        let mut labels = vec![0u8; 64];
        labels[10] = 2;
        labels[40] = 2;
        let (loss, grads) = cae.loss_and_gradients(&image, &labels, 8, 8).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.to_flat().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn class_bias_gradient_is_mean_residual() {
        let cae = Cae::<f64>::new(tiny(), 9).unwrap();
        let image: Vec<f64> = (0..64).map(|i| ((i * 37) % 11) as f64 / 11.0).collect();
        let labels: Vec<u8> = (0..64).map(|i| [0, 1, 2, 3][i % 4]).collect();
        let (maps, pred) = cae.forward(&image, 8, 8).unwrap();
        let (_, grads) = cae.backward(&maps, &labels).unwrap();
        let labeled: Vec<usize> = (0..64).filter(|&i| labels[i] != 0).collect();
        for class in 1..=3u8 {
            let expected = labeled
                .iter()
                .map(|&i| pred.probability(class, i) - if labels[i] == class { 1.0 } else { 0.0 })
                .sum::<f64>()
                / labeled.len() as f64;
            assert!((grads.decoder[0].bias[class as usize - 1] - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn batch_gradient_weights_by_labeled_pixels() {
        let cae = Cae::<f64>::new(tiny(), 2).unwrap();
        let img_a: Vec<f64> = (0..64).map(|i| (i % 5) as f64 / 5.0).collect();
        let img_b: Vec<f64> = (0..64).map(|i| (i % 3) as f64 / 3.0).collect();
        let mut lab_a = vec![0u8; 64];
        lab_a[..10].fill(1);
        let mut lab_b = vec![0u8; 64];
        lab_b[20..50].fill(3);
        let batch = TrainingBatch {
            examples: vec![
                TrainingExample { image: img_a.clone(), labels: lab_a.clone(), width: 8, height: 8 },
                TrainingExample { image: img_b.clone(), labels: lab_b.clone(), width: 8, height: 8 },
            ],
        };
        let (loss, grads) = cae.batch_gradients(&batch).unwrap();
        let (la, ga) = cae.loss_and_gradients(&img_a, &lab_a, 8, 8).unwrap();
        let (lb, gb) = cae.loss_and_gradients(&img_b, &lab_b, 8, 8).unwrap();
        assert!((loss - (10.0 * la + 30.0 * lb) / 40.0).abs() < 1e-14);
        for ((g, a), b) in grads.to_flat().iter().zip(ga.to_flat()).zip(gb.to_flat()) {
            assert!((g - (10.0 * a + 30.0 * b) / 40.0).abs() < 1e-14);
        }
    }
}
