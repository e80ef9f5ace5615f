//! A [`Trainer`] on its own thread, driven by messages.
//!
//! The session side only ever sends commands and reads the last published
//! state, so it never waits for an epoch. Commands take effect between
//! epochs.

use std::collections::BTreeMap;
use std::sync::mpsc::{self, Receiver, Sender, TryRecvError};
use std::sync::{Arc, RwLock};
use std::thread::{self, JoinHandle};

use super::{EpochReport, LabelSnapshot, Phase, Trainer, TrainerError, TrainerState};
use crate::cae::{ArchConfig, Cae, ModelVersion, PredictionMap};
use crate::scalar::Scalar;

enum Command {
    Submit(LabelSnapshot),
    View(Vec<usize>),
    Pause,
    Resume,
    Reset { seed: u64, config: Option<ArchConfig> },
    Close,
    Shutdown,
}

/// Notifications from the worker, in the order they happened.
#[derive(Debug, Clone)]
pub enum TrainerEvent<T> {
    Epoch(Arc<EpochReport<T>>),
    Reset { version: ModelVersion, config: ArchConfig },
    Failed { version: ModelVersion, message: String },
}

/// The most recent results of the worker.
#[derive(Debug, Clone)]
pub struct Published<T> {
    pub state: TrainerState,
    pub config: ArchConfig,
    pub model: Arc<Cae<T>>,
    /// Latest prediction per viewed slice, all from `state.version`.
    pub predictions: BTreeMap<usize, Arc<PredictionMap<T>>>,
}

pub struct TrainerHandle<T> {
    tx: Sender<Command>,
    shared: Arc<RwLock<Published<T>>>,
    /// Generation the worker will be at once queued resets are applied.
    generation: u32,
    join: Option<JoinHandle<()>>,
}

impl<T: Scalar> TrainerHandle<T> {
    /// Moves `trainer` to a new thread; `sink` receives every event.
    pub fn spawn(trainer: Trainer<T>, sink: impl FnMut(TrainerEvent<T>) + Send + 'static) -> Self {
        let shared = Arc::new(RwLock::new(publish(&trainer, BTreeMap::new())));
        let (tx, rx) = mpsc::channel();
        let generation = trainer.version().generation;
        let worker_shared = shared.clone();
        let join = thread::Builder::new()
            .name("trainer".into())
            .spawn(move || run(trainer, rx, worker_shared, sink))
            .expect("spawning trainer thread");
        Self { tx, shared, generation, join: Some(join) }
    }

    fn send(&self, cmd: Command) -> Result<(), TrainerError> {
        self.tx.send(cmd).map_err(|_| TrainerError::SessionClosed)
    }

    pub fn submit(&self, snapshot: LabelSnapshot) -> Result<(), TrainerError> {
        self.send(Command::Submit(snapshot))
    }

    pub fn set_viewed(&self, slices: Vec<usize>) -> Result<(), TrainerError> {
        self.send(Command::View(slices))
    }

    pub fn pause(&self) -> Result<(), TrainerError> {
        self.send(Command::Pause)
    }

    pub fn resume(&self) -> Result<(), TrainerError> {
        self.send(Command::Resume)
    }

    /// Queues a reset and returns the generation it will produce. A new
    /// `config` is validated here, so the worker cannot reject it.
    pub fn reset(&mut self, seed: u64, config: Option<ArchConfig>) -> Result<u32, TrainerError> {
        if let Some(c) = &config {
            c.validate().map_err(TrainerError::Config)?;
        }
        self.send(Command::Reset { seed, config })?;
        self.generation += 1;
        Ok(self.generation)
    }

    pub fn close(&self) -> Result<(), TrainerError> {
        self.send(Command::Close)
    }

    pub fn generation(&self) -> u32 {
        self.generation
    }

    pub fn published(&self) -> Published<T> {
        self.shared.read().expect("trainer state lock").clone()
    }

    pub fn state(&self) -> TrainerState {
        self.shared.read().expect("trainer state lock").state.clone()
    }
}

impl<T> Drop for TrainerHandle<T> {
    fn drop(&mut self) {
        let _ = self.tx.send(Command::Shutdown);
        if let Some(j) = self.join.take() {
            let _ = j.join();
        }
    }
}

fn publish<T: Scalar>(trainer: &Trainer<T>, predictions: BTreeMap<usize, Arc<PredictionMap<T>>>) -> Published<T> {
    Published {
        state: trainer.state(),
        config: trainer.config().clone(),
        model: Arc::new(trainer.model().clone()),
        predictions,
    }
}

fn run<T: Scalar>(
    mut trainer: Trainer<T>,
    rx: Receiver<Command>,
    shared: Arc<RwLock<Published<T>>>,
    mut sink: impl FnMut(TrainerEvent<T>),
) {
    let update_state = |trainer: &Trainer<T>| {
        let mut s = shared.write().expect("trainer state lock");
        s.state = trainer.state();
    };
    loop {
        let cmd = if trainer.phase() == Phase::Training {
            match rx.try_recv() {
                Ok(c) => Some(c),
                Err(TryRecvError::Empty) => None,
                Err(TryRecvError::Disconnected) => return,
            }
        } else {
            match rx.recv() {
                Ok(c) => Some(c),
                Err(_) => return,
            }
        };
        if let Some(cmd) = cmd {
            match cmd {
                Command::Submit(s) => {
                    // Validation failures only drop the snapshot.
                    let _ = trainer.submit_snapshot(s);
                }
                Command::View(v) => trainer.set_viewed(v),
                Command::Pause => trainer.pause(),
                Command::Resume => trainer.resume(),
                Command::Reset { seed, config } => {
                    let config = config.unwrap_or_else(|| trainer.config().clone());
                    trainer.reset_with_config(config, seed).expect("config validated by the handle");
                    *shared.write().expect("trainer state lock") = publish(&trainer, BTreeMap::new());
                    sink(TrainerEvent::Reset { version: trainer.version(), config: trainer.config().clone() });
                    continue;
                }
                Command::Close => trainer.close(),
                Command::Shutdown => return,
            }
            update_state(&trainer);
            continue;
        }
        match trainer.run_epoch() {
            Ok(Some(report)) => {
                let predictions = report.predictions.iter().cloned().collect();
                *shared.write().expect("trainer state lock") = publish(&trainer, predictions);
                sink(TrainerEvent::Epoch(Arc::new(report)));
            }
            Ok(None) => update_state(&trainer),
            Err(e) => {
                update_state(&trainer);
                sink(TrainerEvent::Failed { version: trainer.version(), message: e.to_string() });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::SystemClock;
    use super::*;
    use crate::volume::{Dims, LabelMap, Volume};
    use std::time::Duration;

    #[test]
    fn worker_trains_and_publishes_in_version_order() {
        let cfg = ArchConfig { filter_size: 3, filters_per_layer: vec![2], ..ArchConfig::default() };
        let trainer = Trainer::<f32>::new(cfg, 1, Arc::new(SystemClock::default())).unwrap();
        let (etx, erx) = mpsc::channel();
        let mut handle = TrainerHandle::spawn(trainer, move |e| {
            let _ = etx.send(e);
        });
        let vol = Arc::new(Volume::new("v", Dims::new(8, 8, 2), [1.0; 3], vec![0; 128]).unwrap());
        let mut map = LabelMap::for_volume(&vol);
        map.labels_mut()[3] = 2;
        handle.set_viewed(vec![1]).unwrap();
        handle.submit(LabelSnapshot::capture(1, vol.clone(), &map, 0).unwrap()).unwrap();
        let mut last = ModelVersion::default();
        for _ in 0..5 {
            match erx.recv_timeout(Duration::from_secs(10)).unwrap() {
                TrainerEvent::Epoch(r) => {
                    assert!(r.version > last);
                    assert_eq!(r.predictions[0].0, 1);
                    last = r.version;
                }
                e => panic!("unexpected {e:?}"),
            }
        }
        assert_eq!(handle.reset(2, None).unwrap(), 1);
        loop {
            if let TrainerEvent::Reset { version, .. } = erx.recv_timeout(Duration::from_secs(10)).unwrap() {
                assert_eq!(version, ModelVersion::new(1, 0));
                break;
            }
        }
        let p = handle.published();
        assert_eq!(p.state.phase, Phase::Idle);
        assert!(p.predictions.is_empty());
    }
}
