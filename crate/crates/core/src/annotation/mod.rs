//! Label edits and the interaction history behind them.
//!
//! An [`Annotator`] owns one session's [`LabelMap`], the provenance of every
//! labeled voxel and the [`InteractionLog`]. Every edit is logged with enough
//! detail that [`replay`] rebuilds the labels bit-exactly.

mod analytics;
mod log;
pub mod raster;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use analytics::{analytics, labeling_duration, stack_durations, Analytics};
pub use log::{AcceptRecord, EventPayload, InteractionEvent, InteractionLog, LabelRun, Source};

use crate::cae::{ArchConfig, ModelVersion, PredictionMap};
use crate::scalar::Scalar;
use crate::volume::{Dims, LabelMap, UNLABELED};

/// Class id painted by the eraser brush.
pub const ERASER: u8 = UNLABELED;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnnotationError {
    #[error("out of bounds: {0}")]
    OutOfBounds(String),
    #[error("unknown class {class} (have {classes})")]
    UnknownClass { class: u8, classes: usize },
    #[error("invalid stroke: {0}")]
    InvalidStroke(String),
    #[error("degenerate polygon: {0}")]
    DegeneratePolygon(String),
    #[error("prediction from model generation {prediction}, session is at generation {current}")]
    VersionMismatch { prediction: u32, current: u32 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("threshold {0} outside [0, 1]")]
    BadThreshold(f64),
    #[error("session is closed")]
    SessionClosed,
    #[error("session id {found} does not match {expected}")]
    WrongSession { expected: String, found: String },
    #[error("timestamp {now} precedes last event at {last}")]
    TimeWentBackwards { last: u64, now: u64 },
    #[error("malformed log: {0}")]
    MalformedLog(String),
}

/// A disc brush dragged along `path` on one slice. Class [`ERASER`] clears.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BrushStroke {
    pub session_id: String,
    pub slice: usize,
    pub class: u8,
    pub radius: u32,
    /// `(x, y)` pixel coordinates.
    pub path: Vec<(i64, i64)>,
    pub timestamp_ms: u64,
}

/// A polygon filled on every slice of `first_slice..=last_slice`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolygonFill {
    pub session_id: String,
    pub class: u8,
    pub vertices: Vec<(i64, i64)>,
    pub first_slice: usize,
    pub last_slice: usize,
    pub timestamp_ms: u64,
}

/// Pixel counts of one edit. `newly_labeled + overwritten` is the number of
/// voxels whose value changed; erasing counts as overwriting.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditSummary {
    pub touched: u64,
    pub newly_labeled: u64,
    pub overwritten: u64,
}

impl EditSummary {
    pub fn changed(&self) -> u64 {
        self.newly_labeled + self.overwritten
    }
}

/// Labels plus the source of each labeled voxel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelState {
    pub map: LabelMap,
    pub sources: Vec<Option<Source>>,
}

impl LabelState {
    pub fn empty(dims: Dims, class_names: Vec<String>) -> Self {
        Self { sources: vec![None; dims.voxel_count()], map: LabelMap::empty_with_classes(dims, class_names) }
    }

    /// Voxels whose current label came from `source`.
    pub fn count_from(&self, source: Source) -> usize {
        self.sources.iter().filter(|&&s| s == Some(source)).count()
    }

    fn check_class(&self, class: u8) -> Result<(), AnnotationError> {
        let classes = self.map.num_classes();
        if class as usize > classes {
            return Err(AnnotationError::UnknownClass { class, classes });
        }
        Ok(())
    }

    fn check_slice(&self, k: usize) -> Result<(), AnnotationError> {
        let depth = self.map.dims().depth;
        if k >= depth {
            return Err(AnnotationError::OutOfBounds(format!("slice {k} of {depth}")));
        }
        Ok(())
    }

    fn check_point(&self, (x, y): (i64, i64)) -> Result<(), AnnotationError> {
        let d = self.map.dims();
        if x < 0 || y < 0 || x as usize >= d.width || y as usize >= d.height {
            return Err(AnnotationError::OutOfBounds(format!("({x}, {y}) outside {}x{}", d.width, d.height)));
        }
        Ok(())
    }

    /// Writes `class` over the given in-slice pixels as a user edit.
    fn paint(&mut self, slice: usize, pixels: &[usize], class: u8) -> EditSummary {
        let base = slice * self.map.dims().slice_len();
        let source = (class != ERASER).then_some(Source::User);
        let labels = self.map.labels_mut();
        let mut s = EditSummary { touched: pixels.len() as u64, ..Default::default() };
        for &p in pixels {
            let i = base + p;
            match labels[i] {
                old if old == class => {}
                UNLABELED => s.newly_labeled += 1,
                _ => s.overwritten += 1,
            }
            labels[i] = class;
            self.sources[i] = source;
        }
        s
    }

    pub fn apply_stroke(&mut self, stroke: &BrushStroke) -> Result<EditSummary, AnnotationError> {
        self.check_class(stroke.class)?;
        self.check_slice(stroke.slice)?;
        if stroke.radius == 0 {
            return Err(AnnotationError::InvalidStroke("radius must be at least 1".into()));
        }
        if stroke.path.is_empty() {
            return Err(AnnotationError::InvalidStroke("empty path".into()));
        }
        for &p in &stroke.path {
            self.check_point(p)?;
        }
        let d = self.map.dims();
        let pixels = raster::disc_union(&stroke.path, stroke.radius, d.width, d.height);
        Ok(self.paint(stroke.slice, &pixels, stroke.class))
    }

    pub fn apply_polygon(&mut self, fill: &PolygonFill) -> Result<EditSummary, AnnotationError> {
        self.check_class(fill.class)?;
        if fill.vertices.len() < 3 {
            return Err(AnnotationError::DegeneratePolygon(format!("{} vertices", fill.vertices.len())));
        }
        if raster::doubled_area(&fill.vertices) == 0 {
            return Err(AnnotationError::DegeneratePolygon("zero area".into()));
        }
        if fill.first_slice > fill.last_slice {
            return Err(AnnotationError::OutOfBounds(format!(
                "slice range {}..={}",
                fill.first_slice, fill.last_slice
            )));
        }
        self.check_slice(fill.last_slice)?;
        for &p in &fill.vertices {
            self.check_point(p)?;
        }
        let d = self.map.dims();
        let pixels = raster::polygon_pixels(&fill.vertices, d.width, d.height);
        let mut total = EditSummary::default();
        for k in fill.first_slice..=fill.last_slice {
            let s = self.paint(k, &pixels, fill.class);
            total.touched += s.touched;
            total.newly_labeled += s.newly_labeled;
            total.overwritten += s.overwritten;
        }
        Ok(total)
    }

    /// Runs of unlabeled pixels that accepting `pred` on slice `k` at
    /// `threshold` would fill.
    fn acceptance_runs<T: Scalar>(&self, k: usize, pred: &PredictionMap<T>, threshold: f64) -> Vec<LabelRun> {
        let n = self.map.dims().slice_len();
        let current = &self.map.labels()[k * n..(k + 1) * n];
        let mut runs: Vec<LabelRun> = Vec::new();
        for (p, (&class, &conf)) in pred.classes().iter().zip(pred.confidence()).enumerate() {
            if current[p] != UNLABELED || conf.as_f64() < threshold {
                continue;
            }
            match runs.last_mut() {
                Some(r) if r.start + r.len == p && r.class == class => r.len += 1,
                _ => runs.push(LabelRun { slice: k, start: p, len: 1, class }),
            }
        }
        runs
    }

    /// Fills model-labeled runs, which must be sorted, disjoint and cover
    /// only unlabeled pixels. Nothing changes unless every run is valid.
    fn apply_runs(&mut self, runs: &[LabelRun]) -> Result<EditSummary, AnnotationError> {
        let n = self.map.dims().slice_len();
        let mut end = 0;
        for r in runs {
            self.check_slice(r.slice)?;
            self.check_class(r.class)?;
            if r.class == UNLABELED || r.len == 0 || r.start + r.len > n {
                return Err(AnnotationError::MalformedLog(format!("bad run {r:?}")));
            }
            let base = r.slice * n + r.start;
            if base < end {
                return Err(AnnotationError::MalformedLog(format!("run {r:?} out of order")));
            }
            end = base + r.len;
            if self.map.labels()[base..end].iter().any(|&v| v != UNLABELED) {
                return Err(AnnotationError::MalformedLog(format!("run {r:?} covers labeled pixels")));
            }
        }
        for r in runs {
            let base = r.slice * n + r.start;
            self.map.labels_mut()[base..base + r.len].fill(r.class);
            self.sources[base..base + r.len].fill(Some(Source::Model));
        }
        let total = runs.iter().map(|r| r.len as u64).sum();
        Ok(EditSummary { touched: total, newly_labeled: total, overwritten: 0 })
    }
}

/// One session's labels, provenance and log.
#[derive(Debug, Clone)]
pub struct Annotator {
    state: LabelState,
    log: InteractionLog,
    model_generation: u32,
}

impl Annotator {
    /// Starts a session on an all-unlabeled map.
    pub fn new(
        session_id: &str,
        reader_id: &str,
        volume_id: &str,
        dims: Dims,
        class_names: Vec<String>,
        timestamp_ms: u64,
    ) -> Self {
        let log = InteractionLog::start(session_id, reader_id, volume_id, dims, class_names.clone(), timestamp_ms);
        Self { state: LabelState::empty(dims, class_names), log, model_generation: 0 }
    }

    pub fn labels(&self) -> &LabelMap {
        &self.state.map
    }

    pub fn state(&self) -> &LabelState {
        &self.state
    }

    pub fn log(&self) -> &InteractionLog {
        &self.log
    }

    pub fn is_closed(&self) -> bool {
        self.log.is_ended()
    }

    pub fn model_generation(&self) -> u32 {
        self.model_generation
    }

    /// Predictions from any other generation are refused by
    /// [`Annotator::accept_predictions`].
    pub fn set_model_generation(&mut self, generation: u32) {
        self.model_generation = generation;
    }

    fn check_open(&self, session_id: Option<&str>) -> Result<(), AnnotationError> {
        if self.is_closed() {
            return Err(AnnotationError::SessionClosed);
        }
        match session_id {
            Some(id) if id != self.log.session_id() => Err(AnnotationError::WrongSession {
                expected: self.log.session_id().into(),
                found: id.into(),
            }),
            _ => Ok(()),
        }
    }

    fn check_time(&self, timestamp_ms: u64) -> Result<(), AnnotationError> {
        let last = self.log.last_timestamp();
        if timestamp_ms < last {
            return Err(AnnotationError::TimeWentBackwards { last, now: timestamp_ms });
        }
        Ok(())
    }

    /// Edits validate before writing, so a failed edit leaves no trace.
    fn commit(
        &mut self,
        edit: impl FnOnce(&mut LabelState) -> Result<EditSummary, AnnotationError>,
        timestamp_ms: u64,
        source: Source,
        payload: impl FnOnce() -> EventPayload,
    ) -> Result<EditSummary, AnnotationError> {
        self.check_time(timestamp_ms)?;
        let summary = edit(&mut self.state)?;
        self.log
            .push(InteractionEvent { timestamp_ms, source, pixels_affected: summary.changed(), payload: payload() })
            .expect("session open and time checked");
        Ok(summary)
    }

    pub fn apply_stroke(&mut self, stroke: &BrushStroke) -> Result<EditSummary, AnnotationError> {
        self.check_open(Some(&stroke.session_id))?;
        let s = stroke.clone();
        self.commit(|st| st.apply_stroke(stroke), stroke.timestamp_ms, Source::User, || EventPayload::Stroke {
            stroke: s,
        })
    }

    pub fn apply_polygon(&mut self, fill: &PolygonFill) -> Result<EditSummary, AnnotationError> {
        self.check_open(Some(&fill.session_id))?;
        let f = fill.clone();
        self.commit(|st| st.apply_polygon(fill), fill.timestamp_ms, Source::User, || EventPayload::Polygon { fill: f })
    }

    /// Fills every unlabeled pixel of the given slices whose confidence is at
    /// least `threshold` with the predicted class.
    pub fn accept_predictions<T: Scalar>(
        &mut self,
        predictions: &[(usize, &PredictionMap<T>)],
        threshold: f64,
        timestamp_ms: u64,
    ) -> Result<EditSummary, AnnotationError> {
        self.check_open(None)?;
        if !(0.0..=1.0).contains(&threshold) {
            return Err(AnnotationError::BadThreshold(threshold));
        }
        let d = self.state.map.dims();
        let mut runs = Vec::new();
        let mut version = ModelVersion::new(self.model_generation, 0);
        for (i, &(k, pred)) in predictions.iter().enumerate() {
            self.state.check_slice(k)?;
            if predictions[..i].iter().any(|p| p.0 == k) {
                return Err(AnnotationError::DimensionMismatch(format!("slice {k} given twice")));
            }
            if pred.version().generation != self.model_generation {
                return Err(AnnotationError::VersionMismatch {
                    prediction: pred.version().generation,
                    current: self.model_generation,
                });
            }
            if (pred.width(), pred.height()) != (d.width, d.height) {
                return Err(AnnotationError::DimensionMismatch(format!(
                    "prediction {}x{} for slices {}x{}",
                    pred.width(),
                    pred.height(),
                    d.width,
                    d.height
                )));
            }
            if pred.num_classes() > self.state.map.num_classes() {
                return Err(AnnotationError::UnknownClass {
                    class: pred.num_classes() as u8,
                    classes: self.state.map.num_classes(),
                });
            }
            version = version.max(pred.version());
            runs.extend(self.state.acceptance_runs(k, pred, threshold));
        }
        runs.sort_by_key(|r| (r.slice, r.start));
        let record = AcceptRecord { threshold, version, slices: predictions.iter().map(|p| p.0).collect(), runs };
        let runs = record.runs.clone();
        self.commit(|st| st.apply_runs(&runs), timestamp_ms, Source::Model, || EventPayload::AcceptPredictions {
            accept: record,
        })
    }

    /// Logs a non-editing event.
    pub fn record(&mut self, payload: EventPayload, source: Source, timestamp_ms: u64) -> Result<(), AnnotationError> {
        self.check_open(None)?;
        if matches!(
            payload,
            EventPayload::Stroke { .. } | EventPayload::Polygon { .. } | EventPayload::AcceptPredictions { .. }
        ) {
            return Err(AnnotationError::MalformedLog(format!("{} must go through its edit method", payload.kind())));
        }
        self.log.push(InteractionEvent { timestamp_ms, source, pixels_affected: 0, payload })
    }

    pub fn change_slice(&mut self, slice: usize, timestamp_ms: u64) -> Result<(), AnnotationError> {
        self.state.check_slice(slice)?;
        self.record(EventPayload::SliceChange { slice }, Source::User, timestamp_ms)
    }

    pub fn change_threshold(&mut self, threshold: f64, timestamp_ms: u64) -> Result<(), AnnotationError> {
        if !(0.0..=1.0).contains(&threshold) {
            return Err(AnnotationError::BadThreshold(threshold));
        }
        self.record(EventPayload::ThresholdChange { threshold }, Source::User, timestamp_ms)
    }

    pub fn change_config(&mut self, config: ArchConfig, timestamp_ms: u64) -> Result<(), AnnotationError> {
        self.record(EventPayload::ModelConfigChange { config }, Source::User, timestamp_ms)
    }

    pub fn pause(&mut self, timestamp_ms: u64) -> Result<(), AnnotationError> {
        self.record(EventPayload::Pause, Source::User, timestamp_ms)
    }

    pub fn resume(&mut self, timestamp_ms: u64) -> Result<(), AnnotationError> {
        self.record(EventPayload::Resume, Source::User, timestamp_ms)
    }

    pub fn end(&mut self, timestamp_ms: u64) -> Result<(), AnnotationError> {
        self.record(EventPayload::SessionEnd, Source::User, timestamp_ms)
    }
}

/// Rebuilds labels and provenance from an empty map by re-applying every
/// edit. Fails if any edit's recorded pixel count disagrees.
pub fn replay(log: &InteractionLog) -> Result<LabelState, AnnotationError> {
    let (dims, names) = log.shape();
    let mut state = LabelState::empty(dims, names.to_vec());
    for (i, e) in log.events().iter().enumerate() {
        let summary = match &e.payload {
            EventPayload::Stroke { stroke } => state.apply_stroke(stroke)?,
            EventPayload::Polygon { fill } => state.apply_polygon(fill)?,
            EventPayload::AcceptPredictions { accept } => state.apply_runs(&accept.runs)?,
            _ => continue,
        };
        if summary.changed() != e.pixels_affected {
            return Err(AnnotationError::MalformedLog(format!(
                "event {i} records {} changed pixels, replay changed {}",
                e.pixels_affected,
                summary.changed()
            )));
        }
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::default_class_names;

    fn annotator(w: usize, h: usize, d: usize) -> Annotator {
        Annotator::new("s1", "r1", "vol", Dims::new(w, h, d), default_class_names(), 0)
    }

    fn stroke(slice: usize, class: u8, radius: u32, path: Vec<(i64, i64)>, t: u64) -> BrushStroke {
        BrushStroke { session_id: "s1".into(), slice, class, radius, path, timestamp_ms: t }
    }

    fn square(k0: usize, k1: usize, class: u8) -> PolygonFill {
        PolygonFill {
            session_id: "s1".into(),
            class,
            vertices: vec![(2, 2), (6, 2), (6, 6), (2, 6)],
            first_slice: k0,
            last_slice: k1,
            timestamp_ms: 1,
        }
    }

    fn uniform_prediction(w: usize, h: usize, class: u8, conf: f64, generation: u32) -> PredictionMap<f64> {
        let rest = (1.0 - conf) / 2.0;
        let mut probs = Vec::new();
        for c in 1..=3u8 {
            probs.extend(std::iter::repeat(if c == class { conf } else { rest }).take(w * h));
        }
        PredictionMap::from_probabilities(probs, 3, w, h, ModelVersion::new(generation, 1))
    }

    #[test]
    fn radius_one_stroke_labels_a_disc_once() {
        let mut a = annotator(10, 10, 1);
        let s = stroke(0, 2, 1, vec![(5, 5)], 1);
        assert_eq!(a.apply_stroke(&s).unwrap(), EditSummary { touched: 5, newly_labeled: 5, overwritten: 0 });
        assert_eq!(a.apply_stroke(&s).unwrap().newly_labeled, 0);
        assert_eq!(a.labels().labeled_count(), 5);
        assert_eq!(a.log().events().len(), 3);
    }

    #[test]
    fn stroke_validation() {
        let mut a = annotator(10, 10, 2);
        assert!(matches!(a.apply_stroke(&stroke(0, 4, 1, vec![(1, 1)], 1)), Err(AnnotationError::UnknownClass { .. })));
        assert!(matches!(a.apply_stroke(&stroke(0, 1, 1, vec![(10, 1)], 1)), Err(AnnotationError::OutOfBounds(_))));
        assert!(matches!(a.apply_stroke(&stroke(2, 1, 1, vec![(1, 1)], 1)), Err(AnnotationError::OutOfBounds(_))));
        assert!(a.apply_stroke(&stroke(0, 1, 0, vec![(1, 1)], 1)).is_err());
        assert!(a.apply_stroke(&stroke(0, 1, 1, vec![], 1)).is_err());
        let mut other = stroke(0, 1, 1, vec![(1, 1)], 1);
        other.session_id = "s2".into();
        assert!(matches!(a.apply_stroke(&other), Err(AnnotationError::WrongSession { .. })));
        assert_eq!(a.log().events().len(), 1);
    }

    #[test]
    fn eraser_clears_and_counts_as_overwrite() {
        let mut a = annotator(10, 10, 1);
        a.apply_stroke(&stroke(0, 1, 2, vec![(5, 5)], 1)).unwrap();
        let s = a.apply_stroke(&stroke(0, ERASER, 1, vec![(5, 5)], 2)).unwrap();
        assert_eq!((s.newly_labeled, s.overwritten), (0, 5));
        assert_eq!(a.labels().labeled_count(), 13 - 5);
    }

    #[test]
    fn square_polygon_fills_block_on_slab() {
        let mut a = annotator(10, 10, 3);
        assert_eq!(a.apply_polygon(&square(0, 0, 1)).unwrap().newly_labeled, 25);
        let s = a.apply_polygon(&square(0, 2, 2)).unwrap();
        assert_eq!((s.touched, s.newly_labeled, s.overwritten), (75, 50, 25));
        for k in 0..3 {
            assert_eq!(a.labels().slice(k).unwrap().iter().filter(|&&v| v == 2).count(), 25);
        }
    }

    #[test]
    fn degenerate_polygons_rejected() {
        let mut a = annotator(10, 10, 1);
        let mut f = square(0, 0, 1);
        f.vertices = vec![(1, 1), (3, 3), (5, 5)];
        assert!(matches!(a.apply_polygon(&f), Err(AnnotationError::DegeneratePolygon(_))));
        f.vertices = vec![(1, 1), (3, 3)];
        assert!(a.apply_polygon(&f).is_err());
        assert!(a.apply_polygon(&square(0, 1, 1)).is_err());
    }

    #[test]
    fn accept_fills_only_unlabeled_pixels() {
        let mut a = annotator(4, 4, 1);
        a.apply_stroke(&stroke(0, 1, 1, vec![(0, 0)], 1)).unwrap();
        let pred = uniform_prediction(4, 4, 3, 0.8, 0);
        assert_eq!(a.accept_predictions(&[(0, &pred)], 1.0, 2).unwrap().changed(), 0);
        let s = a.accept_predictions(&[(0, &pred)], 0.5, 3).unwrap();
        assert_eq!(s.newly_labeled, 13);
        let l = a.labels().slice(0).unwrap();
        assert_eq!((l[0], l[1], l[4], l[5]), (1, 1, 1, 3));
        assert_eq!(a.state().count_from(Source::Model), 13);
        assert_eq!(a.state().count_from(Source::User), 3);
    }

    #[test]
    fn accept_rejects_stale_generation() {
        let mut a = annotator(4, 4, 1);
        a.set_model_generation(1);
        let pred = uniform_prediction(4, 4, 1, 0.9, 0);
        assert_eq!(
            a.accept_predictions(&[(0, &pred)], 0.0, 1),
            Err(AnnotationError::VersionMismatch { prediction: 0, current: 1 })
        );
        let wrong = uniform_prediction(3, 4, 1, 0.9, 1);
        assert!(matches!(a.accept_predictions(&[(0, &wrong)], 0.0, 1), Err(AnnotationError::DimensionMismatch(_))));
    }

    #[test]
    fn closed_session_refuses_edits() {
        let mut a = annotator(4, 4, 1);
        a.end(5).unwrap();
        assert_eq!(a.apply_stroke(&stroke(0, 1, 1, vec![(0, 0)], 6)), Err(AnnotationError::SessionClosed));
    }

    #[test]
    fn replay_reproduces_labels_and_sources() {
        let mut a = annotator(8, 8, 2);
        a.apply_stroke(&stroke(0, 2, 2, vec![(1, 1), (6, 6)], 1)).unwrap();
        a.apply_polygon(&square(0, 1, 1)).unwrap();
        let pred = uniform_prediction(8, 8, 3, 0.7, 0);
        a.accept_predictions(&[(1, &pred)], 0.6, 4).unwrap();
        a.apply_stroke(&stroke(1, ERASER, 1, vec![(0, 0)], 5)).unwrap();
        let text = a.log().to_jsonl();
        let back = replay(&InteractionLog::read_jsonl(text.as_bytes()).unwrap()).unwrap();
        assert_eq!(&back, a.state());
    }

    #[test]
    fn replay_detects_tampering() {
        let mut a = annotator(8, 8, 1);
        a.apply_stroke(&stroke(0, 2, 2, vec![(1, 1)], 1)).unwrap();
        let mut events = a.log().events().to_vec();
        events[1].pixels_affected += 1;
        let log = InteractionLog::from_events(events).unwrap();
        assert!(matches!(replay(&log), Err(AnnotationError::MalformedLog(_))));
    }
}
