//! JSON bodies of the HTTP API and the event stream. `docs/protocol.md`
//! describes each one.

use serde::{Deserialize, Serialize};

use slicelab_core::annotation::EditSummary;
use slicelab_core::cae::{ArchConfig, ModelVersion};
use slicelab_core::trainer::Phase;
use slicelab_core::volume::Dims;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeInfo {
    pub id: String,
    pub dims: Dims,
    pub spacing: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreateSession {
    pub reader_id: String,
    pub volume_id: String,
    #[serde(default)]
    pub config: Option<ArchConfig>,
    /// Seed of the initial model and of every later reset.
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub session_id: String,
    pub reader_id: String,
    pub volume_id: String,
    pub dims: Dims,
    pub class_names: Vec<String>,
    pub config: ArchConfig,
    pub version: ModelVersion,
    pub phase: Phase,
    pub epochs_completed: u64,
    pub training_ms: u64,
    pub closed: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrokeRequest {
    pub slice: usize,
    pub class: u8,
    pub radius: u32,
    pub path: Vec<(i64, i64)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolygonRequest {
    pub class: u8,
    pub vertices: Vec<(i64, i64)>,
    pub first_slice: usize,
    pub last_slice: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcceptRequest {
    pub slices: Vec<usize>,
    pub threshold: f64,
    /// Version of the predictions the reader is looking at.
    pub version: ModelVersion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditResponse {
    pub summary: EditSummary,
    /// Snapshot handed to the trainer after the edit.
    pub snapshot_id: u64,
    pub labeled_pixels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionPayload {
    pub slice: usize,
    pub width: usize,
    pub height: usize,
    pub version: ModelVersion,
    pub threshold: f64,
    /// Most probable class id per pixel, row-major.
    pub classes: Vec<u8>,
    /// Probability of that class.
    pub confidence: Vec<f32>,
    /// `confidence < threshold`.
    pub hidden: Vec<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewRequest {
    pub slice: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRequest {
    pub threshold: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainRequest {
    pub epochs: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: u64,
    pub loss: f64,
    pub version: ModelVersion,
    pub snapshot_id: u64,
    pub duration_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainResponse {
    pub epochs: Vec<EpochSummary>,
    pub version: ModelVersion,
    pub phase: Phase,
}

/// One message on `/sessions/{s}/events`. The SSE event name equals `type`
/// and the SSE id is the version as `generation.step`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum StreamEvent {
    /// Always the first event of a connection.
    Status { version: ModelVersion, phase: Phase, epochs_completed: u64 },
    Epoch {
        epoch: u64,
        loss: f64,
        version: ModelVersion,
        snapshot_id: u64,
        duration_ms: u64,
        /// Slices with fresh predictions at `version`.
        slices: Vec<usize>,
    },
    Reset { version: ModelVersion, config: ArchConfig },
    Failed { version: ModelVersion, message: String },
}

impl StreamEvent {
    pub fn version(&self) -> ModelVersion {
        match self {
            Self::Status { version, .. }
            | Self::Epoch { version, .. }
            | Self::Reset { version, .. }
            | Self::Failed { version, .. } => *version,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Status { .. } => "status",
            Self::Epoch { .. } => "epoch",
            Self::Reset { .. } => "reset",
            Self::Failed { .. } => "failed",
        }
    }
}
