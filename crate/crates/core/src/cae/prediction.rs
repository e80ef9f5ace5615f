use serde::{Deserialize, Serialize};

use super::network::Cae;
use super::CaeError;
use crate::scalar::Scalar;
use crate::volume::Volume;

/// Identifies the parameter snapshot a prediction came from.
///
/// `generation` increments on every model reset and `step` on every
/// completed epoch within a generation; the derived ordering is
/// lexicographic, so versions never decrease across resets.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ModelVersion {
    pub generation: u32,
    pub step: u64,
}

impl ModelVersion {
    pub fn new(generation: u32, step: u64) -> Self {
        Self { generation, step }
    }

    pub fn next_step(self) -> Self {
        Self { generation: self.generation, step: self.step + 1 }
    }

    pub fn next_generation(self) -> Self {
        Self { generation: self.generation + 1, step: 0 }
    }
}

impl std::fmt::Display for ModelVersion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}.{}", self.generation, self.step)
    }
}

/// Per-pixel class distribution for one slice.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionMap<T> {
    width: usize,
    height: usize,
    num_classes: usize,
    /// `[class][y][x]`, class index `c` holding class id `c + 1`.
    probabilities: Vec<T>,
    /// Most probable class id (1-based) per pixel.
    classes: Vec<u8>,
    confidence: Vec<T>,
    version: ModelVersion,
}

impl<T: Scalar> PredictionMap<T> {
    /// Softmax of `[class][pixel]` logits.
    pub fn from_logits(logits: &[T], num_classes: usize, width: usize, height: usize, version: ModelVersion) -> Self {
        let hw = width * height;
        let mut probabilities = vec![T::zero(); num_classes * hw];
        for pix in 0..hw {
            let mut m = logits[pix];
            for c in 1..num_classes {
                m = m.max(logits[c * hw + pix]);
            }
            let mut sum = T::zero();
            for c in 0..num_classes {
                let e = (logits[c * hw + pix] - m).exp();
                probabilities[c * hw + pix] = e;
                sum += e;
            }
            for c in 0..num_classes {
                probabilities[c * hw + pix] /= sum;
            }
        }
        Self::from_probabilities(probabilities, num_classes, width, height, version)
    }

    /// Wraps an existing `[class][pixel]` distribution.
    pub fn from_probabilities(
        probabilities: Vec<T>,
        num_classes: usize,
        width: usize,
        height: usize,
        version: ModelVersion,
    ) -> Self {
        let hw = width * height;
        assert_eq!(probabilities.len(), num_classes * hw, "probability plane count");
        let mut classes = vec![1u8; hw];
        let mut confidence = vec![T::zero(); hw];
        for pix in 0..hw {
            let mut best = 0;
            for c in 1..num_classes {
                if probabilities[c * hw + pix] > probabilities[best * hw + pix] {
                    best = c;
                }
            }
            classes[pix] = best as u8 + 1;
            confidence[pix] = probabilities[best * hw + pix];
        }
        Self { width, height, num_classes, probabilities, classes, confidence, version }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn version(&self) -> ModelVersion {
        self.version
    }

    pub fn with_version(mut self, version: ModelVersion) -> Self {
        self.version = version;
        self
    }

    /// Probability of class id `class` (1-based) at pixel index `pix`.
    pub fn probability(&self, class: u8, pix: usize) -> T {
        self.probabilities[(class as usize - 1) * self.width * self.height + pix]
    }

    pub fn probabilities(&self) -> &[T] {
        &self.probabilities
    }

    pub fn distribution(&self, pix: usize) -> Vec<T> {
        let hw = self.width * self.height;
        (0..self.num_classes).map(|c| self.probabilities[c * hw + pix]).collect()
    }

    pub fn classes(&self) -> &[u8] {
        &self.classes
    }

    pub fn confidence(&self) -> &[T] {
        &self.confidence
    }

    /// Pixels whose confidence falls below `threshold`.
    pub fn hidden_mask(&self, threshold: T) -> Vec<bool> {
        self.confidence.iter().map(|&c| c < threshold).collect()
    }
}

/// A slice prediction with its display mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdedPrediction<T> {
    pub slice: usize,
    pub prediction: PredictionMap<T>,
    pub hidden: Vec<bool>,
}

/// Predicts every slice of `volume`. The threshold only sets the hidden
/// flags; distributions are untouched.
pub fn predict_volume<T: Scalar>(
    model: &Cae<T>,
    volume: &Volume,
    threshold: T,
    version: ModelVersion,
) -> Result<Vec<ThresholdedPrediction<T>>, CaeError> {
    let dims = volume.dims();
    (0..dims.depth)
        .map(|k| {
            let image = volume.normalized_slice::<T>(k).map_err(|e| CaeError::ShapeMismatch(e.to_string()))?;
            let prediction = model.predict(&image, dims.width, dims.height, version)?;
            let hidden = prediction.hidden_mask(threshold);
            Ok(ThresholdedPrediction { slice: k, prediction, hidden })
        })
        .collect()
}
