//! Offline training on fixed labels and the depth-versus-accuracy study.

use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cae::{ArchConfig, Cae, CaeError, ModelVersion, Sgd};
use crate::metrics::{scores, MetricsError};
use crate::scalar::Scalar;
use crate::trainer::{LabelSnapshot, ManualClock, SnapshotSlice, Trainer, TrainerError};
use crate::volume::{check_pair, LabelMap, Volume, VolumeError, UNLABELED};

#[derive(Debug, Error)]
pub enum StudyError {
    #[error("no labeled pixels in the training slices")]
    NoLabeledPixels,
    #[error("slice {0} is out of range")]
    SliceOutOfRange(usize),
    #[error("test slice {0} is also a training slice")]
    TestSliceInTraining(usize),
    #[error(transparent)]
    Model(#[from] CaeError),
    #[error(transparent)]
    Trainer(#[from] TrainerError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub seed: u64,
    /// Slices to train on; all labeled slices when empty.
    pub train_slices: Vec<usize>,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Global gradient-norm ceiling; no clipping when `None`.
    #[serde(default)]
    pub max_grad_norm: Option<f64>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 100,
            seed: 0,
            train_slices: Vec::new(),
            learning_rate: crate::cae::DEFAULT_LEARNING_RATE,
            momentum: crate::cae::DEFAULT_MOMENTUM,
            max_grad_norm: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub model: Cae<T>,
    /// Loss of each epoch as reported by the trainer.
    pub losses: Vec<f64>,
    pub seconds: f64,
}

/// Trains a fresh model from `opts.seed` for `opts.epochs` epochs.
pub fn train<T: Scalar>(
    volume: &Arc<Volume>,
    labels: &LabelMap,
    config: &ArchConfig,
    opts: &TrainOptions,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<TrainOutcome<T>, StudyError> {
    check_pair(volume, labels)?;
    let depth = volume.dims().depth;
    let chosen: Vec<usize> = if opts.train_slices.is_empty() { labels.labeled_slices() } else { opts.train_slices.clone() };
    let mut slices = Vec::new();
    for &k in &chosen {
        if k >= depth {
            return Err(StudyError::SliceOutOfRange(k));
        }
        slices.push(SnapshotSlice { index: k, labels: labels.slice(k)?.to_vec() });
    }
    slices.sort_by_key(|s| s.index);
    slices.dedup_by_key(|s| s.index);
    let snapshot = LabelSnapshot { id: 1, volume: volume.clone(), created_ms: 0, slices };
    if snapshot.is_empty() {
        return Err(StudyError::NoLabeledPixels);
    }
    let mut optimizer = Sgd::new(T::lit(opts.learning_rate), T::lit(opts.momentum));
    optimizer.max_grad_norm = opts.max_grad_norm.map(T::lit);
    let mut trainer =
        Trainer::<T>::new(config.clone(), opts.seed, Arc::new(ManualClock::new(0)))?.with_optimizer(optimizer);
    trainer.submit_snapshot(snapshot)?;
    let start = Instant::now();
    let mut losses = Vec::with_capacity(opts.epochs);
    for e in 0..opts.epochs {
        let report = trainer.run_epoch()?.expect("snapshot has labels");
        on_epoch(e + 1, report.loss);
        losses.push(report.loss);
    }
    Ok(TrainOutcome { model: trainer.model().clone(), losses, seconds: start.elapsed().as_secs_f64() })
}

/// Argmax classes of `model` on slice `k`.
pub fn predict_classes<T: Scalar>(model: &Cae<T>, volume: &Volume, k: usize) -> Result<Vec<u8>, StudyError> {
    let image = volume.normalized_slice::<T>(k)?;
    let d = volume.dims();
    Ok(model.predict(&image, d.width, d.height, ModelVersion::default())?.classes().to_vec())
}

/// One row of the depth study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacityRow {
    pub layers: usize,
    /// Percent of truth-labeled test pixels classified correctly.
    pub accuracy: f64,
    /// Entry `i` is class `i + 1`.
    pub f1: Vec<f64>,
    pub training_seconds: f64,
    pub final_loss: f64,
}

/// Gradient-norm ceiling of the depth study. Deeper models otherwise
/// diverge on isolated momentum spikes and can end collapsed.
pub const STUDY_MAX_GRAD_NORM: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacityOptions {
    pub layer_counts: Vec<usize>,
    /// Architecture of every run apart from its depth; each layer gets
    /// `base.filters_per_layer[0]` filters.
    pub base: ArchConfig,
    pub train: TrainOptions,
    pub test_slice: usize,
}

impl CapacityOptions {
    /// Depths 1, 3 and 5 of the default architecture, 200 epochs each with
    /// [`STUDY_MAX_GRAD_NORM`] clipping.
    pub fn new(test_slice: usize, train_slices: Vec<usize>, seed: u64) -> Self {
        Self {
            layer_counts: vec![1, 3, 5],
            base: ArchConfig::default(),
            train: TrainOptions {
                epochs: 200,
                seed,
                train_slices,
                max_grad_norm: Some(STUDY_MAX_GRAD_NORM),
                ..TrainOptions::default()
            },
            test_slice,
        }
    }
}

/// Trains one model per depth on the training slices and scores it on the
/// held-out slice against `truth`.
pub fn capacity_study<T: Scalar>(
    volume: &Arc<Volume>,
    truth: &LabelMap,
    opts: &CapacityOptions,
    mut progress: impl FnMut(usize, usize, f64),
) -> Result<Vec<CapacityRow>, StudyError> {
    if opts.test_slice >= volume.dims().depth {
        return Err(StudyError::SliceOutOfRange(opts.test_slice));
    }
    let train_slices = if opts.train.train_slices.is_empty() {
        truth.labeled_slices().into_iter().filter(|&k| k != opts.test_slice).collect()
    } else {
        opts.train.train_slices.clone()
    };
    if train_slices.contains(&opts.test_slice) {
        return Err(StudyError::TestSliceInTraining(opts.test_slice));
    }
    let train_opts = TrainOptions { train_slices, ..opts.train.clone() };
    let test_truth = truth.slice(opts.test_slice)?;
    if test_truth.iter().all(|&v| v == UNLABELED) {
        return Err(StudyError::NoLabeledPixels);
    }
    let filters = opts.base.filters_per_layer.first().copied().unwrap_or(10);
    let mut rows = Vec::new();
    for &layers in &opts.layer_counts {
        let config = ArchConfig { num_layers: layers, filters_per_layer: vec![filters; layers], ..opts.base.clone() };
        let out = train::<T>(volume, truth, &config, &train_opts, |e, l| progress(layers, e, l))?;
        let pred = predict_classes(&out.model, volume, opts.test_slice)?;
        let s = scores(test_truth, &pred, config.num_classes)?;
        rows.push(CapacityRow {
            layers,
            accuracy: 100.0 * s.accuracy,
            f1: s.per_class.iter().map(|c| c.f1).collect(),
            training_seconds: out.seconds,
            final_loss: out.losses.last().copied().unwrap_or(f64::NAN),
        });
    }
    Ok(rows)
}

/// Writes rows as CSV: `layers,accuracy_percent,f1_class_1..,training_seconds,final_loss`.
pub fn write_capacity_csv<W: std::io::Write>(rows: &[CapacityRow], out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    let classes = rows.first().map_or(0, |r| r.f1.len());
    let mut header = vec!["layers".to_string(), "accuracy_percent".into()];
    header.extend((1..=classes).map(|c| format!("f1_class_{c}")));
    header.extend(["training_seconds".into(), "final_loss".into()]);
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.layers.to_string(), format!("{:.2}", r.accuracy)];
        rec.extend(r.f1.iter().map(|f| format!("{f:.4}")));
        rec.extend([format!("{:.3}", r.training_seconds), format!("{:.6}", r.final_loss)]);
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
