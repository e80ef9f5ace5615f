use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{replay, AnnotationError, EventPayload, InteractionLog, Source, ERASER};
use crate::volume::LabelMap;

/// Per-session labeling statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Analytics {
    pub volume_id: String,
    /// Time between session start and end, excluding pauses. Open sessions
    /// count up to their last event.
    pub labeling_duration_ms: u64,
    /// Stroke events per class; entry `i` is class `i + 1`.
    pub strokes_per_class: Vec<u64>,
    pub eraser_strokes: u64,
    pub user_labeled: u64,
    pub model_labeled: u64,
    /// `100 · user_labeled / (user_labeled + model_labeled)`, `0` with no
    /// labels. A pixel counts for whichever source wrote it last.
    pub percent_user_labeled: f64,
}

/// Active time of a session.
pub fn labeling_duration(log: &InteractionLog) -> u64 {
    let mut total = 0;
    let mut active_since = None;
    for e in log.events() {
        match e.payload {
            EventPayload::SessionStart { .. } | EventPayload::Resume => active_since = Some(e.timestamp_ms),
            EventPayload::Pause | EventPayload::SessionEnd => {
                if let Some(t) = active_since.take() {
                    total += e.timestamp_ms - t;
                }
            }
            _ => {}
        }
    }
    if let Some(t) = active_since {
        total += log.last_timestamp() - t;
    }
    total
}

/// Statistics of `log`, which must replay to exactly `map`.
pub fn analytics(log: &InteractionLog, map: &LabelMap) -> Result<Analytics, AnnotationError> {
    let state = replay(log)?;
    if state.map != *map {
        return Err(AnnotationError::MalformedLog("log does not reproduce the label map".into()));
    }
    let mut strokes_per_class = vec![0; map.num_classes()];
    let mut eraser_strokes = 0;
    for e in log.events() {
        if let EventPayload::Stroke { stroke } = &e.payload {
            match stroke.class {
                ERASER => eraser_strokes += 1,
                c => strokes_per_class[c as usize - 1] += 1,
            }
        }
    }
    let user = state.count_from(Source::User) as u64;
    let model = state.count_from(Source::Model) as u64;
    let total = user + model;
    Ok(Analytics {
        volume_id: log.volume_id().into(),
        labeling_duration_ms: labeling_duration(log),
        strokes_per_class,
        eraser_strokes,
        user_labeled: user,
        model_labeled: model,
        percent_user_labeled: if total == 0 { 0.0 } else { 100.0 * user as f64 / total as f64 },
    })
}

/// Total active labeling time per volume over many sessions.
pub fn stack_durations<'a>(logs: impl IntoIterator<Item = &'a InteractionLog>) -> BTreeMap<String, u64> {
    let mut out = BTreeMap::new();
    for log in logs {
        *out.entry(log.volume_id().to_string()).or_default() += labeling_duration(log);
    }
    out
}
