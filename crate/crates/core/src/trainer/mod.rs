//! Incremental training on the labels of a live session.
//!
//! [`Trainer`] is a synchronous state machine: snapshots go in through
//! [`Trainer::submit_snapshot`], epochs run on [`Trainer::run_epoch`].
//! [`worker`] runs one on a background thread and [`script`] drives one
//! from a fixed list of steps for reproducible tests.

mod clock;
pub mod script;
pub mod worker;

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use clock::{Clock, ManualClock, SystemClock};
pub use worker::{Published, TrainerEvent, TrainerHandle};

use crate::annotation::EventPayload;
use crate::cae::{ArchConfig, Cae, CaeError, ModelVersion, PredictionMap, Sgd};
use crate::scalar::Scalar;
use crate::volume::{check_pair, LabelMap, Volume, VolumeError, UNLABELED};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainerError {
    #[error("session is closed")]
    SessionClosed,
    #[error("trainer is {0:?}, not training")]
    NotTraining(Phase),
    #[error("training paused: {0}")]
    Numeric(CaeError),
    #[error(transparent)]
    Config(CaeError),
    #[error("bad snapshot: {0}")]
    BadSnapshot(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Idle,
    Training,
    Paused,
}

/// Labels of one slice at snapshot time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SnapshotSlice {
    pub index: usize,
    pub labels: Vec<u8>,
}

/// An immutable copy of the labeled slices of one label map.
#[derive(Debug, Clone)]
pub struct LabelSnapshot {
    pub id: u64,
    pub volume: Arc<Volume>,
    pub created_ms: u64,
    /// Slices with at least one labeled pixel, ascending.
    pub slices: Vec<SnapshotSlice>,
}

impl LabelSnapshot {
    pub fn capture(id: u64, volume: Arc<Volume>, map: &LabelMap, created_ms: u64) -> Result<Self, VolumeError> {
        check_pair(&volume, map)?;
        let slices = map
            .labeled_slices()
            .into_iter()
            .map(|k| Ok(SnapshotSlice { index: k, labels: map.slice(k)?.to_vec() }))
            .collect::<Result<_, VolumeError>>()?;
        Ok(Self { id, volume, created_ms, slices })
    }

    pub fn volume_id(&self) -> &str {
        self.volume.id()
    }

    pub fn labeled_pixels(&self) -> usize {
        self.slices.iter().map(|s| s.labels.iter().filter(|&&v| v != UNLABELED).count()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.labeled_pixels() == 0
    }
}

/// What [`Trainer::submit_snapshot`] did with a snapshot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ack {
    pub snapshot_id: u64,
    /// The queued snapshot this one displaced without being trained on.
    pub replaced: Option<u64>,
    pub phase: Phase,
}

/// Observable trainer status.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub phase: Phase,
    pub version: ModelVersion,
    pub epochs_completed: u64,
    /// Milliseconds spent training, by volume id.
    pub training_ms: BTreeMap<String, u64>,
    pub last_snapshot_id: Option<u64>,
    pub diagnostic: Option<String>,
}

/// The outcome of one epoch.
#[derive(Debug, Clone)]
pub struct EpochReport<T> {
    /// 1-based within the current model generation.
    pub epoch: u64,
    /// Masked cross-entropy over every labeled pixel of the snapshot, each
    /// slice evaluated just before its own update.
    pub loss: f64,
    pub version: ModelVersion,
    pub snapshot_id: u64,
    pub volume_id: String,
    pub started_ms: u64,
    pub duration_ms: u64,
    /// Fresh predictions for the viewed slices of the trained volume.
    pub predictions: Vec<(usize, Arc<PredictionMap<T>>)>,
}

impl<T> EpochReport<T> {
    /// The `train_epoch` log entry for this epoch.
    pub fn event(&self) -> EventPayload {
        EventPayload::TrainEpoch {
            epoch: self.epoch,
            loss: self.loss,
            version: self.version,
            volume_id: self.volume_id.clone(),
            duration_ms: self.duration_ms,
        }
    }
}

/// Per-slice training data of the active snapshot.
struct Prepared<T> {
    snapshot: LabelSnapshot,
    images: Vec<Vec<T>>,
}

/// Owns the model and turns label snapshots into parameter updates.
pub struct Trainer<T> {
    config: ArchConfig,
    model: Cae<T>,
    optimizer: Sgd<T>,
    clock: Arc<dyn Clock>,
    pending: Option<LabelSnapshot>,
    active: Option<Prepared<T>>,
    viewed: Vec<usize>,
    version: ModelVersion,
    epochs: u64,
    training_ms: BTreeMap<String, u64>,
    /// Start of the not yet accounted training interval.
    mark_ms: u64,
    paused: bool,
    closed: bool,
    diagnostic: Option<String>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: ArchConfig, seed: u64, clock: Arc<dyn Clock>) -> Result<Self, TrainerError> {
        let model = Cae::new(config.clone(), seed).map_err(TrainerError::Config)?;
        let mark_ms = clock.now_ms();
        Ok(Self {
            config,
            model,
            optimizer: Sgd::default(),
            clock,
            pending: None,
            active: None,
            viewed: Vec::new(),
            version: ModelVersion::default(),
            epochs: 0,
            training_ms: BTreeMap::new(),
            mark_ms,
            paused: false,
            closed: false,
            diagnostic: None,
        })
    }

    pub fn with_optimizer(mut self, optimizer: Sgd<T>) -> Self {
        self.optimizer = optimizer;
        self
    }

    pub fn config(&self) -> &ArchConfig {
        &self.config
    }

    pub fn model(&self) -> &Cae<T> {
        &self.model
    }

    pub fn version(&self) -> ModelVersion {
        self.version
    }

    /// The snapshot training would use next: the queued one if any.
    fn newest(&self) -> Option<&LabelSnapshot> {
        self.pending.as_ref().or(self.active.as_ref().map(|a| &a.snapshot))
    }

    pub fn phase(&self) -> Phase {
        if self.paused {
            Phase::Paused
        } else if self.newest().is_some_and(|s| !s.is_empty()) && !self.closed {
            Phase::Training
        } else {
            Phase::Idle
        }
    }

    /// Books the time since the last mark to the stack being trained.
    fn account(&mut self) {
        let now = self.clock.now_ms();
        if self.phase() == Phase::Training {
            let stack = self.newest().map(|s| s.volume_id().to_string()).unwrap_or_default();
            *self.training_ms.entry(stack).or_default() += now.saturating_sub(self.mark_ms);
        }
        self.mark_ms = now;
    }

    pub fn state(&self) -> TrainerState {
        TrainerState {
            phase: self.phase(),
            version: self.version,
            epochs_completed: self.epochs,
            training_ms: self.training_time_report(),
            last_snapshot_id: self.newest().map(|s| s.id),
            diagnostic: self.diagnostic.clone(),
        }
    }

    /// Training time per volume id, including the interval in progress.
    pub fn training_time_report(&self) -> BTreeMap<String, u64> {
        let mut report = self.training_ms.clone();
        if self.phase() == Phase::Training {
            if let Some(s) = self.newest() {
                *report.entry(s.volume_id().to_string()).or_default() +=
                    self.clock.now_ms().saturating_sub(self.mark_ms);
            }
        }
        report
    }

    /// Queues `snapshot` for the next epoch, displacing any queued one.
    pub fn submit_snapshot(&mut self, snapshot: LabelSnapshot) -> Result<Ack, TrainerError> {
        if self.closed {
            return Err(TrainerError::SessionClosed);
        }
        let dims = snapshot.volume.dims();
        if snapshot.slices.iter().any(|s| s.index >= dims.depth || s.labels.len() != dims.slice_len()) {
            return Err(TrainerError::BadSnapshot("slice index or size does not fit the volume".into()));
        }
        if let Some(&v) = snapshot.slices.iter().flat_map(|s| &s.labels).find(|&&v| v as usize > self.config.num_classes) {
            return Err(TrainerError::BadSnapshot(format!("label {v} beyond {} classes", self.config.num_classes)));
        }
        self.account();
        let snapshot_id = snapshot.id;
        let replaced = self.pending.replace(snapshot).map(|s| s.id);
        Ok(Ack { snapshot_id, replaced, phase: self.phase() })
    }

    /// Slices whose predictions are refreshed after every epoch.
    pub fn set_viewed(&mut self, slices: Vec<usize>) {
        self.viewed = slices;
    }

    pub fn pause(&mut self) {
        self.account();
        self.paused = true;
    }

    /// Leaves the paused phase and clears any diagnostic.
    pub fn resume(&mut self) {
        self.account();
        self.paused = false;
        self.diagnostic = None;
    }

    /// Refuses further snapshots; the model stays readable.
    pub fn close(&mut self) {
        self.account();
        self.closed = true;
        self.pending = None;
        self.active = None;
    }

    /// Starts a new generation: fresh parameters from `seed`, no snapshots,
    /// zeroed counters and time report.
    pub fn reset_for_new_user(&mut self, seed: u64) -> Result<ModelVersion, TrainerError> {
        let config = self.config.clone();
        self.reset_with_config(config, seed)
    }

    /// Like [`Trainer::reset_for_new_user`] with a new architecture. On an
    /// invalid config nothing changes.
    pub fn reset_with_config(&mut self, config: ArchConfig, seed: u64) -> Result<ModelVersion, TrainerError> {
        let model = Cae::new(config.clone(), seed).map_err(TrainerError::Config)?;
        self.config = config;
        self.model = model;
        self.optimizer.reset();
        self.pending = None;
        self.active = None;
        self.epochs = 0;
        self.training_ms.clear();
        self.mark_ms = self.clock.now_ms();
        self.paused = false;
        self.diagnostic = None;
        self.version = self.version.next_generation();
        Ok(self.version)
    }

    /// Moves the queued snapshot into training position.
    fn promote(&mut self) -> Result<(), TrainerError> {
        let Some(snapshot) = self.pending.take() else {
            return Ok(());
        };
        let images = snapshot
            .slices
            .iter()
            .map(|s| snapshot.volume.normalized_slice::<T>(s.index))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| TrainerError::BadSnapshot(e.to_string()))?;
        self.active = Some(Prepared { snapshot, images });
        Ok(())
    }

    fn fail(&mut self, e: CaeError) -> TrainerError {
        self.account();
        self.paused = true;
        self.diagnostic = Some(e.to_string());
        TrainerError::Numeric(e)
    }

    /// One SGD pass over every labeled slice of the newest snapshot, one
    /// slice per step in ascending slice order. Returns `None` without
    /// touching the model when the snapshot has no labels.
    pub fn run_epoch(&mut self) -> Result<Option<EpochReport<T>>, TrainerError> {
        match self.phase() {
            Phase::Training => {}
            Phase::Idle if !self.closed => {
                self.account();
                self.promote()?;
                return Ok(None);
            }
            p => return Err(TrainerError::NotTraining(p)),
        }
        self.account();
        let started_ms = self.mark_ms;
        self.promote()?;
        let version = self.version.next_step();
        let prepared = self.active.as_ref().expect("training implies a snapshot");
        let snapshot_id = prepared.snapshot.id;
        let volume_id = prepared.snapshot.volume_id().to_string();
        let outcome = epoch_pass(&self.model, &self.optimizer, prepared, &self.viewed, version);
        let (model, optimizer, loss, predictions) = outcome.map_err(|e| self.fail(e))?;
        self.model = model;
        self.optimizer = optimizer;
        self.version = version;
        self.epochs += 1;
        self.account();
        Ok(Some(EpochReport {
            epoch: self.epochs,
            loss,
            version,
            snapshot_id,
            volume_id,
            started_ms,
            duration_ms: self.mark_ms - started_ms,
            predictions,
        }))
    }

    /// Prediction for slice `k` of `volume` from the current parameters.
    pub fn predict(&self, volume: &Volume, k: usize) -> Result<PredictionMap<T>, TrainerError> {
        let image = volume.normalized_slice::<T>(k).map_err(|e| TrainerError::BadSnapshot(e.to_string()))?;
        let d = volume.dims();
        self.model.predict(&image, d.width, d.height, self.version).map_err(TrainerError::Numeric)
    }
}

type EpochOutcome<T> = (Cae<T>, Sgd<T>, f64, Vec<(usize, Arc<PredictionMap<T>>)>);

/// Updates copies of the model and optimizer, then predicts the viewed slices
/// with the updated parameters. The reported loss is the pixel-weighted mean
/// of each slice's loss just before its own step.
fn epoch_pass<T: Scalar>(
    model: &Cae<T>,
    optimizer: &Sgd<T>,
    prepared: &Prepared<T>,
    viewed: &[usize],
    version: ModelVersion,
) -> Result<EpochOutcome<T>, CaeError> {
    let snapshot = &prepared.snapshot;
    let dims = snapshot.volume.dims();
    let (w, h) = (dims.width, dims.height);
    let mut model = model.clone();
    let mut optimizer = optimizer.clone();
    let mut total = 0.0;
    let mut count = 0usize;
    for (slice, image) in snapshot.slices.iter().zip(&prepared.images) {
        let n = slice.labels.iter().filter(|&&v| v != UNLABELED).count();
        if n == 0 {
            continue;
        }
        let (loss, grads) = model.loss_and_gradients(image, &slice.labels, w, h)?;
        optimizer.step(model.params_mut(), &grads)?;
        total += loss.as_f64() * n as f64;
        count += n;
    }
    let mut predictions = Vec::new();
    for (slice, image) in snapshot.slices.iter().zip(&prepared.images) {
        if viewed.contains(&slice.index) {
            predictions.push((slice.index, Arc::new(model.predict(image, w, h, version)?)));
        }
    }
    for &k in viewed {
        if k >= dims.depth || predictions.iter().any(|p| p.0 == k) {
            continue;
        }
        let image = snapshot.volume.normalized_slice::<T>(k).expect("index checked");
        predictions.push((k, Arc::new(model.predict(&image, w, h, version)?)));
    }
    predictions.sort_by_key(|p| p.0);
    Ok((model, optimizer, total / count as f64, predictions))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Dims;

    fn tiny() -> ArchConfig {
        ArchConfig { filter_size: 3, filters_per_layer: vec![3], ..ArchConfig::default() }
    }

    fn volume(id: &str) -> Arc<Volume> {
        let dims = Dims::new(12, 10, 3);
        let voxels = (0..dims.voxel_count()).map(|i| ((i * 37) % 400) as i16 - 200).collect();
        Arc::new(Volume::new(id, dims, [1.0; 3], voxels).unwrap())
    }

    fn snapshot(id: u64, vol: &Arc<Volume>, labeled: &[(usize, usize, u8)]) -> LabelSnapshot {
        let mut map = LabelMap::for_volume(vol);
        let n = vol.dims().slice_len();
        for &(k, p, c) in labeled {
            map.labels_mut()[k * n + p] = c;
        }
        LabelSnapshot::capture(id, vol.clone(), &map, 0).unwrap()
    }

    fn trainer(clock: &ManualClock) -> Trainer<f64> {
        Trainer::new(tiny(), 7, Arc::new(clock.clone())).unwrap()
    }

    #[test]
    fn empty_snapshot_stays_idle() {
        let clock = ManualClock::new(0);
        let mut t = trainer(&clock);
        let vol = volume("a");
        let ack = t.submit_snapshot(snapshot(1, &vol, &[])).unwrap();
        assert_eq!(ack.phase, Phase::Idle);
        assert!(t.run_epoch().unwrap().is_none());
        assert_eq!(t.version(), ModelVersion::default());
        assert_eq!(t.state().epochs_completed, 0);
    }

    #[test]
    fn latest_snapshot_wins() {
        let clock = ManualClock::new(0);
        let mut t = trainer(&clock);
        let vol = volume("a");
        t.submit_snapshot(snapshot(1, &vol, &[(0, 3, 1)])).unwrap();
        let ack = t.submit_snapshot(snapshot(2, &vol, &[(1, 4, 2)])).unwrap();
        assert_eq!(ack.replaced, Some(1));
        let r = t.run_epoch().unwrap().unwrap();
        assert_eq!((r.snapshot_id, r.epoch, r.version), (2, 1, ModelVersion::new(0, 1)));
    }

    #[test]
    fn epoch_loss_is_weighted_mean_of_step_losses() {
        let clock = ManualClock::new(0);
        let mut t = trainer(&clock);
        let vol = volume("a");
        let labeled = [(0, 3, 1), (0, 50, 2), (2, 7, 3)];
        let snap = snapshot(1, &vol, &labeled);
        let mut model = t.model().clone();
        let mut opt = Sgd::default();
        let mut sum = 0.0;
        for k in [0, 2] {
            let image = vol.normalized_slice::<f64>(k).unwrap();
            let labels = &snap.slices.iter().find(|s| s.index == k).unwrap().labels;
            let pixels = labeled.iter().filter(|l| l.0 == k).count() as f64;
            let (loss, grads) = model.loss_and_gradients(&image, labels, 12, 10).unwrap();
            opt.step(model.params_mut(), &grads).unwrap();
            sum += loss * pixels;
        }
        t.submit_snapshot(snap).unwrap();
        t.set_viewed(vec![1, 2]);
        let r = t.run_epoch().unwrap().unwrap();
        assert!((r.loss - sum / 3.0).abs() < 1e-12);
        assert_eq!(t.model(), &model);
        assert_eq!(r.predictions.iter().map(|p| p.0).collect::<Vec<_>>(), vec![1, 2]);
        assert!(r.predictions.iter().all(|p| p.1.version() == r.version));
    }

    #[test]
    fn reset_starts_new_generation() {
        let clock = ManualClock::new(0);
        let mut t = trainer(&clock);
        let vol = volume("a");
        t.submit_snapshot(snapshot(1, &vol, &[(0, 3, 1)])).unwrap();
        clock.advance(40);
        t.run_epoch().unwrap();
        let before = t.version();
        let v = t.reset_for_new_user(7).unwrap();
        assert!(v > before);
        assert_eq!(v, ModelVersion::new(1, 0));
        assert_eq!(t.phase(), Phase::Idle);
        assert!(t.training_time_report().is_empty());
        assert_eq!(t.model(), &Cae::new(tiny(), 7).unwrap());
    }

    #[test]
    fn time_is_booked_to_the_trained_stack() {
        let clock = ManualClock::new(100);
        let mut t = trainer(&clock);
        let (a, b) = (volume("a"), volume("b"));
        clock.advance(50);
        assert!(t.training_time_report().is_empty());
        t.submit_snapshot(snapshot(1, &a, &[(0, 3, 1)])).unwrap();
        clock.advance(300);
        t.run_epoch().unwrap();
        t.submit_snapshot(snapshot(2, &b, &[(0, 3, 1)])).unwrap();
        clock.advance(200);
        t.pause();
        clock.advance(1000);
        let report = t.training_time_report();
        assert_eq!((report["a"], report["b"]), (300, 200));
    }

    #[test]
    fn closed_trainer_rejects_snapshots() {
        let clock = ManualClock::new(0);
        let mut t = trainer(&clock);
        t.close();
        let vol = volume("a");
        assert_eq!(t.submit_snapshot(snapshot(1, &vol, &[(0, 0, 1)])).unwrap_err(), TrainerError::SessionClosed);
    }

    #[test]
    fn numeric_failure_pauses() {
        let clock = ManualClock::new(0);
        let mut t = trainer(&clock);
        t.model.params_mut().decoder[0].bias[0] = f64::NAN;
        let vol = volume("a");
        t.submit_snapshot(snapshot(1, &vol, &[(0, 0, 1)])).unwrap();
        assert!(matches!(t.run_epoch(), Err(TrainerError::Numeric(_))));
        let s = t.state();
        assert_eq!(s.phase, Phase::Paused);
        assert!(s.diagnostic.is_some());
        assert_eq!(s.version, ModelVersion::default());
    }
}
