//! Deterministic replay of snapshot/epoch interleavings on a fake clock.

use std::sync::Arc;

use super::{Ack, LabelSnapshot, ManualClock, Trainer, TrainerError, TrainerState};
use crate::cae::{ArchConfig, CaeParams, ModelVersion};
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub enum ScriptStep {
    Submit(LabelSnapshot),
    /// Attempts one epoch; an idle or paused trainer skips it.
    Epoch,
    Advance(u64),
    View(Vec<usize>),
    Pause,
    Resume,
    Reset(u64),
}

/// One completed epoch of a scripted run.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord<T> {
    pub epoch: u64,
    pub version: ModelVersion,
    pub loss: f64,
    pub snapshot_id: u64,
    pub duration_ms: u64,
    pub params: CaeParams<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<T> {
    pub acks: Vec<Ack>,
    pub epochs: Vec<EpochRecord<T>>,
    pub final_state: TrainerState,
}

impl<T: Scalar> Trajectory<T> {
    /// Bit patterns of every recorded parameter vector, for exact comparison.
    pub fn param_bits(&self) -> Vec<Vec<u64>> {
        self.epochs.iter().map(|e| e.params.to_flat().iter().map(|v| v.as_f64().to_bits()).collect()).collect()
    }
}

/// A fixed sequence of trainer operations run against a [`ManualClock`].
#[derive(Debug, Clone, Default)]
pub struct ScriptedScheduler {
    start_ms: u64,
    steps: Vec<ScriptStep>,
}

impl ScriptedScheduler {
    pub fn new(start_ms: u64) -> Self {
        Self { start_ms, steps: Vec::new() }
    }

    pub fn step(mut self, step: ScriptStep) -> Self {
        self.steps.push(step);
        self
    }

    pub fn submit(self, snapshot: LabelSnapshot) -> Self {
        self.step(ScriptStep::Submit(snapshot))
    }

    pub fn epochs(mut self, n: usize) -> Self {
        self.steps.extend(std::iter::repeat(ScriptStep::Epoch).take(n));
        self
    }

    pub fn advance(self, ms: u64) -> Self {
        self.step(ScriptStep::Advance(ms))
    }

    pub fn steps(&self) -> &[ScriptStep] {
        &self.steps
    }

    /// Runs the script on a fresh trainer.
    pub fn run<T: Scalar>(&self, config: ArchConfig, seed: u64) -> Result<Trajectory<T>, TrainerError> {
        let clock = ManualClock::new(self.start_ms);
        let mut trainer = Trainer::new(config, seed, Arc::new(clock.clone()))?;
        self.run_on(&mut trainer, &clock)
    }

    /// Runs the script on `trainer`, whose clock must be `clock`.
    pub fn run_on<T: Scalar>(&self, trainer: &mut Trainer<T>, clock: &ManualClock) -> Result<Trajectory<T>, TrainerError> {
        let mut acks = Vec::new();
        let mut epochs = Vec::new();
        for step in &self.steps {
            match step {
                ScriptStep::Submit(s) => acks.push(trainer.submit_snapshot(s.clone())?),
                ScriptStep::Epoch => match trainer.run_epoch() {
                    Ok(Some(r)) => epochs.push(EpochRecord {
                            epoch: r.epoch,
                            version: r.version,
                            loss: r.loss,
                            snapshot_id: r.snapshot_id,
                            duration_ms: r.duration_ms,
                        params: trainer.model().params().clone(),
                    }),
                    Ok(None) | Err(TrainerError::NotTraining(_)) => {}
                    Err(e) => return Err(e),
                },
                ScriptStep::Advance(ms) => clock.advance(*ms),
                ScriptStep::View(v) => trainer.set_viewed(v.clone()),
                ScriptStep::Pause => trainer.pause(),
                ScriptStep::Resume => trainer.resume(),
                ScriptStep::Reset(seed) => {
                    trainer.reset_for_new_user(*seed)?;
                }
            }
        }
        Ok(Trajectory { acks, epochs, final_state: trainer.state() })
    }
}
