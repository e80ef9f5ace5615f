//! Interaction events and their JSON-lines encoding.
//!
//! Each line is one [`InteractionEvent`] object:
//! `{"timestamp_ms":..,"source":"user"|"model","pixels_affected":..,"kind":"stroke",..}`
//! with the kind-specific fields next to `kind`; strokes, polygons and
//! accepted predictions nest their record under `stroke`, `fill` and `accept`. The first line is
//! always a `session_start` event carrying the session, reader, volume and
//! label-map shape, so a log file alone is enough to rebuild the labels.

use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{AnnotationError, BrushStroke, PolygonFill};
use crate::cae::{ArchConfig, ModelVersion};
use crate::volume::Dims;

/// Who produced a label or event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    User,
    Model,
}

/// A run of consecutive pixels of one slice set to `class`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRun {
    pub slice: usize,
    pub start: usize,
    pub len: usize,
    pub class: u8,
}

/// The exact outcome of accepting predictions, recorded as runs because the
/// prediction itself is not part of the log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcceptRecord {
    pub threshold: f64,
    pub version: ModelVersion,
    pub slices: Vec<usize>,
    pub runs: Vec<LabelRun>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventPayload {
    SessionStart {
        session_id: String,
        reader_id: String,
        volume_id: String,
        dims: Dims,
        class_names: Vec<String>,
    },
    SessionEnd,
    Pause,
    Resume,
    Stroke {
        stroke: BrushStroke,
    },
    Polygon {
        fill: PolygonFill,
    },
    AcceptPredictions {
        accept: AcceptRecord,
    },
    SliceChange {
        slice: usize,
    },
    ThresholdChange {
        threshold: f64,
    },
    ModelConfigChange {
        config: ArchConfig,
    },
    TrainEpoch {
        epoch: u64,
        loss: f64,
        version: ModelVersion,
        volume_id: String,
        duration_ms: u64,
    },
}

impl EventPayload {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::SessionStart { .. } => "session_start",
            Self::SessionEnd => "session_end",
            Self::Pause => "pause",
            Self::Resume => "resume",
            Self::Stroke { .. } => "stroke",
            Self::Polygon { .. } => "polygon",
            Self::AcceptPredictions { .. } => "accept_predictions",
            Self::SliceChange { .. } => "slice_change",
            Self::ThresholdChange { .. } => "threshold_change",
            Self::ModelConfigChange { .. } => "model_config_change",
            Self::TrainEpoch { .. } => "train_epoch",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionEvent {
    pub timestamp_ms: u64,
    pub source: Source,
    pub pixels_affected: u64,
    #[serde(flatten)]
    pub payload: EventPayload,
}

/// One session's ordered events.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionLog {
    session_id: String,
    reader_id: String,
    volume_id: String,
    events: Vec<InteractionEvent>,
}

impl InteractionLog {
    /// A log holding only its `session_start` event.
    pub fn start(
        session_id: &str,
        reader_id: &str,
        volume_id: &str,
        dims: Dims,
        class_names: Vec<String>,
        timestamp_ms: u64,
    ) -> Self {
        let payload = EventPayload::SessionStart {
            session_id: session_id.into(),
            reader_id: reader_id.into(),
            volume_id: volume_id.into(),
            dims,
            class_names,
        };
        Self {
            session_id: session_id.into(),
            reader_id: reader_id.into(),
            volume_id: volume_id.into(),
            events: vec![InteractionEvent { timestamp_ms, source: Source::User, pixels_affected: 0, payload }],
        }
    }

    /// Checks the structural rules and wraps `events`.
    pub fn from_events(events: Vec<InteractionEvent>) -> Result<Self, AnnotationError> {
        let malformed = |m: String| Err(AnnotationError::MalformedLog(m));
        let Some(first) = events.first() else {
            return malformed("empty log".into());
        };
        let EventPayload::SessionStart { session_id, reader_id, volume_id, .. } = &first.payload else {
            return malformed(format!("log begins with {}", first.payload.kind()));
        };
        let (session_id, reader_id, volume_id) = (session_id.clone(), reader_id.clone(), volume_id.clone());
        let mut ended = false;
        let mut paused = false;
        for (i, pair) in events.windows(2).enumerate() {
            let e = &pair[1];
            if e.timestamp_ms < pair[0].timestamp_ms {
                return malformed(format!("event {} goes back in time", i + 1));
            }
            if ended {
                return malformed(format!("event {} follows session_end", i + 1));
            }
            match e.payload {
                EventPayload::SessionStart { .. } => return malformed(format!("second session_start at {}", i + 1)),
                EventPayload::SessionEnd => ended = true,
                EventPayload::Pause if paused => return malformed(format!("pause while paused at {}", i + 1)),
                EventPayload::Resume if !paused => return malformed(format!("resume while active at {}", i + 1)),
                EventPayload::Pause | EventPayload::Resume => paused = !paused,
                _ => {}
            }
        }
        Ok(Self { session_id, reader_id, volume_id, events })
    }

    pub fn session_id(&self) -> &str {
        &self.session_id
    }

    pub fn reader_id(&self) -> &str {
        &self.reader_id
    }

    pub fn volume_id(&self) -> &str {
        &self.volume_id
    }

    pub fn events(&self) -> &[InteractionEvent] {
        &self.events
    }

    /// `(dims, class_names)` from the opening event.
    pub fn shape(&self) -> (Dims, &[String]) {
        match &self.events[0].payload {
            EventPayload::SessionStart { dims, class_names, .. } => (*dims, class_names),
            _ => unreachable!("validated at construction"),
        }
    }

    pub fn last_timestamp(&self) -> u64 {
        self.events.last().map_or(0, |e| e.timestamp_ms)
    }

    pub fn is_ended(&self) -> bool {
        matches!(self.events.last().map(|e| &e.payload), Some(EventPayload::SessionEnd))
    }

    pub fn is_paused(&self) -> bool {
        let mut paused = false;
        for e in &self.events {
            match e.payload {
                EventPayload::Pause => paused = true,
                EventPayload::Resume => paused = false,
                _ => {}
            }
        }
        paused
    }

    /// Appends an event, enforcing time order and the session_end rule.
    pub fn push(&mut self, event: InteractionEvent) -> Result<(), AnnotationError> {
        if self.is_ended() {
            return Err(AnnotationError::SessionClosed);
        }
        if event.timestamp_ms < self.last_timestamp() {
            return Err(AnnotationError::TimeWentBackwards { last: self.last_timestamp(), now: event.timestamp_ms });
        }
        match event.payload {
            EventPayload::SessionStart { .. } => {
                return Err(AnnotationError::MalformedLog("second session_start".into()));
            }
            EventPayload::Pause if self.is_paused() => {
                return Err(AnnotationError::MalformedLog("already paused".into()));
            }
            EventPayload::Resume if !self.is_paused() => {
                return Err(AnnotationError::MalformedLog("not paused".into()));
            }
            _ => {}
        }
        self.events.push(event);
        Ok(())
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> io::Result<()> {
        for e in &self.events {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("JSON is UTF-8")
    }

    /// Parses JSON lines; blank lines are skipped.
    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self, AnnotationError> {
        let mut events = Vec::new();
        for (n, line) in input.lines().enumerate() {
            let line = line.map_err(|e| AnnotationError::MalformedLog(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let event = serde_json::from_str(&line)
                .map_err(|e| AnnotationError::MalformedLog(format!("line {}: {e}", n + 1)))?;
            events.push(event);
        }
        Self::from_events(events)
    }
}
