//! Seeded synthetic volumes with ground truth for the three default classes.
//!
//! Every slice has a constant dark band along its border (non-pulmonary
//! tissue); the interior is split by thresholding a smooth random field into
//! a low-variance smooth texture (normal parenchyma) and high-frequency
//! oriented stripes (reticular pattern). The field varies slowly along z so
//! neighboring slices differ but stay alike.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volume::{
    default_class_names, Dims, LabelMap, Volume, VolumeError, CLASS_NON_PULMONARY, CLASS_NORMAL, CLASS_RETICULAR,
};

pub const BORDER_INTENSITY: i16 = -1000;
const NORMAL_MEAN: f64 = -700.0;
const NORMAL_SPREAD: f64 = 20.0;
const RETICULAR_MEAN: f64 = -450.0;
const RETICULAR_AMPLITUDE: f64 = 350.0;
const NOISE: f64 = 10.0;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("bad dimensions: {0}")]
    BadDims(String),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    pub depth: usize,
    /// Target share of each class per slice: normal, reticular, border.
    pub fractions: [f64; 3],
    /// Stripe wavelength in pixels.
    pub stripe_period: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { width: 128, height: 128, depth: 4, fractions: [0.5, 0.3, 0.2], stripe_period: 5.0, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct Synthetic {
    pub volume: Volume,
    pub truth: LabelMap,
}

/// Share of a `w×h` slice inside a border band of thickness `b`.
fn band_fraction(w: usize, h: usize, b: usize) -> f64 {
    1.0 - ((w - 2 * b) * (h - 2 * b)) as f64 / (w * h) as f64
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::BadDims(m));
        if self.width < 8 || self.height < 8 || self.depth == 0 {
            return bad(format!("{}x{}x{} (need at least 8x8x1)", self.width, self.height, self.depth));
        }
        if self.fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (self.fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad(format!("class fractions {:?} must be in [0, 1] and sum to 1", self.fractions));
        }
        if !(self.stripe_period >= 2.0) {
            return bad(format!("stripe period {} below 2 pixels", self.stripe_period));
        }
        Ok(())
    }

    /// Border thickness whose band share is closest to the target.
    fn border_width(&self) -> usize {
        let max_b = (self.width.min(self.height) - 1) / 2;
        (0..=max_b)
            .min_by(|&a, &b| {
                let d = |t| (band_fraction(self.width, self.height, t) - self.fractions[2]).abs();
                d(a).total_cmp(&d(b))
            })
            .unwrap_or(0)
    }
}

/// A sum of random plane waves with wavelengths between `min_len` and
/// `max_len` pixels, scaled to roughly unit amplitude.
struct SmoothField {
    waves: Vec<[f64; 5]>,
}

impl SmoothField {
    fn new(rng: &mut impl Rng, count: usize, min_len: f64, max_len: f64) -> Self {
        let waves = (0..count)
            .map(|_| {
                let angle = rng.gen_range(0.0..TAU);
                let len = rng.gen_range(min_len..max_len);
                let (s, c) = angle.sin_cos();
                [c / len, s / len, rng.gen_range(-1.0..1.0) / (4.0 * max_len), rng.gen_range(0.0..TAU), rng.gen_range(0.5..1.0)]
            })
            .collect();
        Self { waves }
    }

    fn at(&self, x: f64, y: f64, z: f64) -> f64 {
        let n = self.waves.len() as f64;
        self.waves.iter().map(|w| w[4] * (TAU * (w[0] * x + w[1] * y + w[2] * z) + w[3]).cos()).sum::<f64>() / n.sqrt()
    }
}

pub fn generate(cfg: &SynthConfig) -> Result<Synthetic, SynthError> {
    cfg.validate()?;
    let (w, h, d) = (cfg.width, cfg.height, cfg.depth);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let extent = w.max(h) as f64;
    let regions = SmoothField::new(&mut rng, 6, extent / 3.0, extent * 1.5);
    let shading = SmoothField::new(&mut rng, 4, extent / 4.0, extent);
    let theta: f64 = rng.gen_range(0.0..TAU);
    let (st, ct) = theta.sin_cos();
    let b = cfg.border_width();
    let n = w * h;
    let mut voxels = vec![0i16; n * d];
    let mut labels = vec![0u8; n * d];
    for z in 0..d {
        let phase: f64 = rng.gen_range(0.0..TAU);
        let interior: Vec<usize> = (0..n)
            .filter(|&i| {
                let (x, y) = (i % w, i / w);
                x >= b && y >= b && x < w - b && y < h - b
            })
            .collect();
        let field: Vec<f64> = interior.iter().map(|&i| regions.at((i % w) as f64, (i / w) as f64, z as f64)).collect();
        let target = ((cfg.fractions[1] * n as f64).round() as usize).min(interior.len());
        let mut sorted = field.clone();
        sorted.sort_by(f64::total_cmp);
        let threshold = if target == 0 { f64::INFINITY } else { sorted[interior.len() - target] };
        let plane = &mut labels[z * n..(z + 1) * n];
        plane.fill(CLASS_NON_PULMONARY);
        for (&i, &f) in interior.iter().zip(&field) {
            plane[i] = if f >= threshold { CLASS_RETICULAR } else { CLASS_NORMAL };
        }
        for i in 0..n {
            let (x, y) = ((i % w) as f64, (i / w) as f64);
            let noise = rng.gen_range(-NOISE..NOISE);
            let v = match plane[i] {
                CLASS_NORMAL => NORMAL_MEAN + NORMAL_SPREAD * shading.at(x, y, z as f64) + noise,
                CLASS_RETICULAR => {
                    RETICULAR_MEAN + RETICULAR_AMPLITUDE * (TAU * (x * ct + y * st) / cfg.stripe_period + phase).cos() + noise
                }
                _ => BORDER_INTENSITY as f64,
            };
            voxels[z * n + i] = v.round() as i16;
        }
    }
    let dims = Dims::new(w, h, d);
    let volume = Volume::new(format!("synth-{}", cfg.seed), dims, [1.0, 1.0, 1.0], voxels)?;
    let truth = LabelMap::from_labels(dims, labels, default_class_names())?;
    Ok(Synthetic { volume, truth })
}
