//! One reader's session: labels and log on the request side, a trainer on
//! the other, joined only by immutable snapshots and trainer events.
//!
//! Lock order is annotator before engine. Trainer events never take the
//! engine lock, and manual epochs release it before publishing.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};

use tokio::sync::broadcast;

use slicelab_core::annotation::{Annotator, EditSummary, Source};
use slicelab_core::cae::{ArchConfig, Cae, ModelVersion, PredictionMap};
use slicelab_core::trainer::{Clock, LabelSnapshot, Phase, Trainer, TrainerEvent, TrainerHandle, TrainerState};
use slicelab_core::volume::{default_class_names, Volume};

use crate::error::ServiceError;
use crate::wire::{EpochSummary, SessionInfo, StreamEvent};

/// Scalar used by interactive sessions.
pub type Real = f32;

/// How a session's trainer is driven.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TrainingMode {
    /// A worker thread trains whenever labels exist.
    #[default]
    Background,
    /// Epochs run only on `POST /sessions/{s}/train`.
    Manual,
}

const EVENT_BUFFER: usize = 256;
const CACHE_ENTRIES: usize = 64;

enum Engine {
    Background(TrainerHandle<Real>),
    Manual(Trainer<Real>),
}

/// Recently served predictions, keyed by version then slice.
#[derive(Default)]
struct PredictionCache {
    entries: BTreeMap<(ModelVersion, usize), Arc<PredictionMap<Real>>>,
}

impl PredictionCache {
    fn get(&self, version: ModelVersion, slice: usize) -> Option<Arc<PredictionMap<Real>>> {
        self.entries.get(&(version, slice)).cloned()
    }

    fn insert(&mut self, slice: usize, pred: Arc<PredictionMap<Real>>) {
        self.entries.insert((pred.version(), slice), pred);
        while self.entries.len() > CACHE_ENTRIES {
            self.entries.pop_first();
        }
    }
}

/// State touched by both the request side and the trainer.
struct Shared {
    annotator: Mutex<Annotator>,
    events: broadcast::Sender<StreamEvent>,
    cache: Mutex<PredictionCache>,
    clock: Arc<dyn Clock>,
}

impl Shared {
    fn on_trainer_event(&self, event: TrainerEvent<Real>) {
        let stream = match event {
            TrainerEvent::Epoch(report) => {
                {
                    let mut cache = lock(&self.cache);
                    for (k, p) in &report.predictions {
                        cache.insert(*k, p.clone());
                    }
                }
                let mut annotator = lock(&self.annotator);
                let t = self.clock.now_ms().max(annotator.log().last_timestamp());
                // A closed log takes no more events; the epoch still streams.
                let _ = annotator.record(report.event(), Source::Model, t);
                drop(annotator);
                StreamEvent::Epoch {
                    epoch: report.epoch,
                    loss: report.loss,
                    version: report.version,
                    snapshot_id: report.snapshot_id,
                    duration_ms: report.duration_ms,
                    slices: report.predictions.iter().map(|p| p.0).collect(),
                }
            }
            TrainerEvent::Reset { version, config } => StreamEvent::Reset { version, config },
            TrainerEvent::Failed { version, message } => StreamEvent::Failed { version, message },
        };
        // No subscribers is not an error.
        let _ = self.events.send(stream);
    }
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

pub struct Session {
    id: String,
    reader_id: String,
    volume: Arc<Volume>,
    seed: u64,
    shared: Arc<Shared>,
    engine: Mutex<Engine>,
    config: Mutex<ArchConfig>,
    next_snapshot: AtomicU64,
}

impl Session {
    /// A fresh model from `seed` and an empty log opened at the current time.
    pub fn create(
        id: String,
        reader_id: String,
        volume: Arc<Volume>,
        config: ArchConfig,
        seed: u64,
        mode: TrainingMode,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, ServiceError> {
        config.validate().map_err(|e| ServiceError::BadConfig(e.to_string()))?;
        let class_names = if config.num_classes == default_class_names().len() {
            default_class_names()
        } else {
            (1..=config.num_classes).map(|c| format!("class {c}")).collect()
        };
        let mut trainer = Trainer::<Real>::new(config.clone(), seed, clock.clone())?;
        trainer.set_viewed(vec![0]);
        let mut annotator =
            Annotator::new(&id, &reader_id, volume.id(), volume.dims(), class_names, clock.now_ms());
        annotator.set_model_generation(trainer.version().generation);
        let (events, _) = broadcast::channel(EVENT_BUFFER);
        let shared = Arc::new(Shared {
            annotator: Mutex::new(annotator),
            events,
            cache: Mutex::new(PredictionCache::default()),
            clock,
        });
        let engine = match mode {
            TrainingMode::Manual => Engine::Manual(trainer),
            TrainingMode::Background => {
                let sink = shared.clone();
                Engine::Background(TrainerHandle::spawn(trainer, move |e| sink.on_trainer_event(e)))
            }
        };
        Ok(Self {
            id,
            reader_id,
            volume,
            seed,
            shared,
            engine: Mutex::new(engine),
            config: Mutex::new(config),
            next_snapshot: AtomicU64::new(1),
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn volume(&self) -> &Arc<Volume> {
        &self.volume
    }

    pub fn config(&self) -> ArchConfig {
        lock(&self.config).clone()
    }

    pub fn subscribe(&self) -> broadcast::Receiver<StreamEvent> {
        self.shared.events.subscribe()
    }

    pub fn is_closed(&self) -> bool {
        lock(&self.shared.annotator).is_closed()
    }

    pub fn trainer_state(&self) -> TrainerState {
        match &*lock(&self.engine) {
            Engine::Background(h) => h.state(),
            Engine::Manual(t) => t.state(),
        }
    }

    /// Current parameters, their version, and predictions already computed
    /// for them.
    fn current_model(&self) -> (Arc<Cae<Real>>, ModelVersion, BTreeMap<usize, Arc<PredictionMap<Real>>>) {
        match &*lock(&self.engine) {
            Engine::Background(h) => {
                let p = h.published();
                (p.model, p.state.version, p.predictions)
            }
            Engine::Manual(t) => (Arc::new(t.model().clone()), t.version(), BTreeMap::new()),
        }
    }

    pub fn current_version(&self) -> ModelVersion {
        self.trainer_state().version
    }

    pub fn info(&self) -> SessionInfo {
        let state = self.trainer_state();
        let annotator = lock(&self.shared.annotator);
        SessionInfo {
            session_id: self.id.clone(),
            reader_id: self.reader_id.clone(),
            volume_id: self.volume.id().to_string(),
            dims: self.volume.dims(),
            class_names: annotator.labels().class_names().to_vec(),
            config: self.config(),
            version: state.version,
            phase: state.phase,
            epochs_completed: state.epochs_completed,
            training_ms: state.training_ms.values().sum(),
            closed: annotator.is_closed(),
        }
    }

    /// The first event of every stream connection.
    pub fn status_event(&self) -> StreamEvent {
        let s = self.trainer_state();
        StreamEvent::Status { version: s.version, phase: s.phase, epochs_completed: s.epochs_completed }
    }

    fn timestamp(&self, annotator: &Annotator) -> u64 {
        self.shared.clock.now_ms().max(annotator.log().last_timestamp())
    }

    /// Hands the trainer a copy of the current labels. Called with the
    /// annotator locked so snapshots reach the trainer in edit order.
    fn submit_labels(&self, annotator: &Annotator, engine: &mut Engine) -> Result<u64, ServiceError> {
        let id = self.next_snapshot.fetch_add(1, Ordering::Relaxed);
        let t = self.timestamp(annotator);
        let snapshot = LabelSnapshot::capture(id, self.volume.clone(), annotator.labels(), t)?;
        match engine {
            Engine::Background(h) => h.submit(snapshot)?,
            Engine::Manual(tr) => {
                tr.submit_snapshot(snapshot)?;
            }
        }
        Ok(id)
    }

    /// Applies an edit to the labels, then submits a snapshot of the result.
    pub fn edit(
        &self,
        apply: impl FnOnce(&mut Annotator, &str, u64) -> Result<EditSummary, ServiceError>,
    ) -> Result<(EditSummary, u64, usize), ServiceError> {
        let mut annotator = lock(&self.shared.annotator);
        if annotator.is_closed() {
            return Err(ServiceError::SessionClosed);
        }
        let t = self.timestamp(&annotator);
        let summary = apply(&mut annotator, &self.id, t)?;
        let snapshot_id = self.submit_labels(&annotator, &mut lock(&self.engine))?;
        Ok((summary, snapshot_id, annotator.labels().labeled_count()))
    }

    /// Prediction for slice `k` at `version`, computing it when `version`
    /// is current. Older versions are served only while cached.
    pub fn prediction(
        &self,
        k: usize,
        version: Option<ModelVersion>,
    ) -> Result<Arc<PredictionMap<Real>>, ServiceError> {
        let depth = self.volume.dims().depth;
        if k >= depth {
            return Err(ServiceError::SliceOutOfRange { index: k, depth });
        }
        if let Some(v) = version {
            if let Some(p) = lock(&self.shared.cache).get(v, k) {
                return Ok(p);
            }
        }
        let (model, current, published) = self.current_model();
        if let Some(v) = version.filter(|&v| v != current) {
            return Err(ServiceError::StalePrediction { requested: v, current });
        }
        if let Some(p) = published.get(&k).or(lock(&self.shared.cache).get(current, k).as_ref()) {
            return Ok(p.clone());
        }
        let d = self.volume.dims();
        let image = self.volume.normalized_slice::<Real>(k)?;
        let pred = Arc::new(model.predict(&image, d.width, d.height, current)?);
        lock(&self.shared.cache).insert(k, pred.clone());
        Ok(pred)
    }

    /// Accepts the predictions the reader saw at `version` on `slices`.
    pub fn accept(
        &self,
        slices: &[usize],
        threshold: f64,
        version: ModelVersion,
    ) -> Result<(EditSummary, u64, usize), ServiceError> {
        let generation = lock(&self.shared.annotator).model_generation();
        if version.generation != generation {
            return Err(slicelab_core::annotation::AnnotationError::VersionMismatch {
                prediction: version.generation,
                current: generation,
            }
            .into());
        }
        let preds = slices
            .iter()
            .map(|&k| self.prediction(k, Some(version)).map(|p| (k, p)))
            .collect::<Result<Vec<_>, _>>()?;
        let refs: Vec<(usize, &PredictionMap<Real>)> = preds.iter().map(|(k, p)| (*k, p.as_ref())).collect();
        self.edit(|a, _, t| Ok(a.accept_predictions(&refs, threshold, t)?))
    }

    pub fn view(&self, slice: usize) -> Result<(), ServiceError> {
        let mut annotator = lock(&self.shared.annotator);
        let t = self.timestamp(&annotator);
        annotator.change_slice(slice, t)?;
        match &mut *lock(&self.engine) {
            Engine::Background(h) => h.set_viewed(vec![slice])?,
            Engine::Manual(tr) => tr.set_viewed(vec![slice]),
        }
        Ok(())
    }

    pub fn set_threshold(&self, threshold: f64) -> Result<(), ServiceError> {
        let mut annotator = lock(&self.shared.annotator);
        let t = self.timestamp(&annotator);
        annotator.change_threshold(threshold, t)?;
        Ok(())
    }

    pub fn pause(&self) -> Result<(), ServiceError> {
        let mut annotator = lock(&self.shared.annotator);
        let t = self.timestamp(&annotator);
        annotator.pause(t)?;
        match &mut *lock(&self.engine) {
            Engine::Background(h) => h.pause()?,
            Engine::Manual(tr) => tr.pause(),
        }
        Ok(())
    }

    pub fn resume(&self) -> Result<(), ServiceError> {
        let mut annotator = lock(&self.shared.annotator);
        let t = self.timestamp(&annotator);
        annotator.resume(t)?;
        match &mut *lock(&self.engine) {
            Engine::Background(h) => h.resume()?,
            Engine::Manual(tr) => tr.resume(),
        }
        Ok(())
    }

    /// Ends the log and stops training. The labels stay readable.
    pub fn end(&self) -> Result<(), ServiceError> {
        let mut annotator = lock(&self.shared.annotator);
        let t = self.timestamp(&annotator);
        annotator.end(t)?;
        match &mut *lock(&self.engine) {
            Engine::Background(h) => h.close()?,
            Engine::Manual(tr) => tr.close(),
        }
        Ok(())
    }

    /// Replaces the architecture: the model restarts from the session seed
    /// in a new generation and retrains on the current labels.
    pub fn reconfigure(&self, config: ArchConfig) -> Result<ModelVersion, ServiceError> {
        config.validate().map_err(|e| ServiceError::BadConfig(e.to_string()))?;
        let mut annotator = lock(&self.shared.annotator);
        if annotator.is_closed() {
            return Err(ServiceError::SessionClosed);
        }
        let classes = annotator.labels().num_classes();
        if config.num_classes != classes {
            return Err(ServiceError::BadConfig(format!(
                "session has {classes} classes, config has {}",
                config.num_classes
            )));
        }
        let t = self.timestamp(&annotator);
        annotator.change_config(config.clone(), t)?;
        let mut engine = lock(&self.engine);
        let (generation, reset) = match &mut *engine {
            Engine::Background(h) => (h.reset(self.seed, Some(config.clone()))?, None),
            Engine::Manual(tr) => {
                let v = tr.reset_with_config(config.clone(), self.seed)?;
                (v.generation, Some(v))
            }
        };
        annotator.set_model_generation(generation);
        *lock(&self.config) = config.clone();
        if annotator.labels().labeled_count() > 0 {
            self.submit_labels(&annotator, &mut engine)?;
        }
        drop(engine);
        drop(annotator);
        if let Some(version) = reset {
            self.shared.on_trainer_event(TrainerEvent::Reset { version, config });
        }
        Ok(ModelVersion::new(generation, 0))
    }

    /// Runs up to `epochs` epochs on the calling thread. Stops early when
    /// there is nothing to train on.
    pub fn train(&self, epochs: u32) -> Result<Vec<EpochSummary>, ServiceError> {
        let mut done = Vec::new();
        for _ in 0..epochs {
            let outcome = match &mut *lock(&self.engine) {
                Engine::Background(_) => return Err(ServiceError::NotManual),
                Engine::Manual(tr) if tr.phase() != Phase::Training => break,
                Engine::Manual(tr) => tr.run_epoch().map_err(|e| (e, tr.version())),
            };
            match outcome {
                Ok(Some(report)) => {
                    done.push(EpochSummary {
                        epoch: report.epoch,
                        loss: report.loss,
                        version: report.version,
                        snapshot_id: report.snapshot_id,
                        duration_ms: report.duration_ms,
                    });
                    self.shared.on_trainer_event(TrainerEvent::Epoch(Arc::new(report)));
                }
                Ok(None) => break,
                Err((e, version)) => {
                    let message = e.to_string();
                    self.shared.on_trainer_event(TrainerEvent::Failed { version, message });
                    return Err(e.into());
                }
            }
        }
        Ok(done)
    }

    /// The log as JSON lines.
    pub fn log_jsonl(&self) -> String {
        lock(&self.shared.annotator).log().to_jsonl()
    }

    /// Labels of slice `k`, row-major.
    pub fn labels(&self, k: usize) -> Result<Vec<u8>, ServiceError> {
        Ok(lock(&self.shared.annotator).labels().slice(k)?.to_vec())
    }
}
