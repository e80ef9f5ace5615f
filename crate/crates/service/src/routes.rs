use std::collections::{BTreeMap, HashMap};
use std::convert::Infallible;
use std::sync::{Arc, RwLock};

use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::stream::{self, Stream, StreamExt};
use serde::Deserialize;
use tokio::sync::broadcast;

use slicelab_core::annotation::{BrushStroke, PolygonFill};
use slicelab_core::cae::{ArchConfig, ModelVersion};
use slicelab_core::trainer::{Clock, SystemClock};
use slicelab_core::volume::Volume;

use crate::error::ServiceError;
use crate::render::{slice_png, slice_raw, Window};
use crate::session::{Session, TrainingMode};
use crate::wire::*;

type ApiResult<T> = Result<T, ServiceError>;

/// Volumes, sessions and the training policy shared by all handlers.
pub struct AppState {
    volumes: BTreeMap<String, Arc<Volume>>,
    sessions: RwLock<HashMap<String, Arc<Session>>>,
    mode: TrainingMode,
    clock: Arc<dyn Clock>,
    default_config: ArchConfig,
}

impl AppState {
    pub fn new(volumes: impl IntoIterator<Item = Volume>, mode: TrainingMode) -> Self {
        Self::with_clock(volumes, mode, Arc::new(SystemClock::default()))
    }

    pub fn with_clock(volumes: impl IntoIterator<Item = Volume>, mode: TrainingMode, clock: Arc<dyn Clock>) -> Self {
        Self {
            volumes: volumes.into_iter().map(|v| (v.id().to_string(), Arc::new(v))).collect(),
            sessions: RwLock::new(HashMap::new()),
            mode,
            clock,
            default_config: ArchConfig::default(),
        }
    }

    /// Architecture of sessions created without one.
    pub fn with_default_config(mut self, config: ArchConfig) -> Self {
        self.default_config = config;
        self
    }

    pub fn volume(&self, id: &str) -> ApiResult<&Arc<Volume>> {
        self.volumes.get(id).ok_or_else(|| ServiceError::UnknownVolume(id.into()))
    }

    pub fn session(&self, id: &str) -> ApiResult<Arc<Session>> {
        self.sessions.read().expect("session table lock").get(id).cloned().ok_or(ServiceError::UnknownSession)
    }

    pub fn create_session(&self, req: CreateSession) -> ApiResult<Arc<Session>> {
        let volume = self.volume(&req.volume_id)?.clone();
        let id = uuid::Uuid::new_v4().simple().to_string();
        let config = req.config.unwrap_or_else(|| self.default_config.clone());
        let session = Arc::new(Session::create(
            id.clone(),
            req.reader_id,
            volume,
            config,
            req.seed,
            self.mode,
            self.clock.clone(),
        )?);
        self.sessions.write().expect("session table lock").insert(id, session.clone());
        Ok(session)
    }
}

/// The full HTTP surface; `docs/protocol.md` is its reference.
pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/volumes", get(list_volumes))
        .route("/volumes/{v}/slices/{k}", get(get_slice))
        .route("/sessions", post(create_session))
        .route("/sessions/{s}", get(get_session))
        .route("/sessions/{s}/strokes", post(post_stroke))
        .route("/sessions/{s}/polygons", post(post_polygon))
        .route("/sessions/{s}/accept", post(post_accept))
        .route("/sessions/{s}/predictions/{k}", get(get_predictions))
        .route("/sessions/{s}/labels/{k}", get(get_labels))
        .route("/sessions/{s}/config", get(get_config).put(put_config))
        .route("/sessions/{s}/view", post(post_view))
        .route("/sessions/{s}/threshold", post(post_threshold))
        .route("/sessions/{s}/pause", post(post_pause))
        .route("/sessions/{s}/resume", post(post_resume))
        .route("/sessions/{s}/end", post(post_end))
        .route("/sessions/{s}/train", post(post_train))
        .route("/sessions/{s}/log", get(get_log))
        .route("/sessions/{s}/events", get(get_events))
        .with_state(state)
}

type AppRef = State<Arc<AppState>>;

async fn list_volumes(State(app): AppRef) -> Json<Vec<VolumeInfo>> {
    Json(
        app.volumes
            .values()
            .map(|v| VolumeInfo { id: v.id().to_string(), dims: v.dims(), spacing: v.spacing() })
            .collect(),
    )
}

#[derive(Debug, Deserialize)]
struct SliceQuery {
    #[serde(default)]
    format: Option<String>,
    level: Option<f64>,
    width: Option<f64>,
}

async fn get_slice(State(app): AppRef, Path((v, k)): Path<(String, usize)>, Query(q): Query<SliceQuery>) -> ApiResult<Response> {
    let view = app.volume(&v)?.get_slice(k)?;
    let dims = [
        ("x-width", view.width.to_string()),
        ("x-height", view.height.to_string()),
    ];
    match q.format.as_deref().unwrap_or("png") {
        "png" => {
            let d = Window::default();
            let window = Window { level: q.level.unwrap_or(d.level), width: q.width.unwrap_or(d.width) };
            let body = slice_png(&view, window)?;
            Ok(([(header::CONTENT_TYPE, "image/png".to_string())], dims, body).into_response())
        }
        "raw" => Ok((
            [(header::CONTENT_TYPE, "application/octet-stream".to_string())],
            dims,
            slice_raw(&view),
        )
            .into_response()),
        other => Err(ServiceError::BadRequest(format!("unknown slice format {other:?}"))),
    }
}

async fn create_session(State(app): AppRef, Json(req): Json<CreateSession>) -> ApiResult<(StatusCode, Json<SessionInfo>)> {
    let session = app.create_session(req)?;
    Ok((StatusCode::CREATED, Json(session.info())))
}

async fn get_session(State(app): AppRef, Path(s): Path<String>) -> ApiResult<Json<SessionInfo>> {
    Ok(Json(app.session(&s)?.info()))
}

fn edit_response((summary, snapshot_id, labeled_pixels): (slicelab_core::annotation::EditSummary, u64, usize)) -> Json<EditResponse> {
    Json(EditResponse { summary, snapshot_id, labeled_pixels })
}

async fn post_stroke(State(app): AppRef, Path(s): Path<String>, Json(req): Json<StrokeRequest>) -> ApiResult<Json<EditResponse>> {
    let session = app.session(&s)?;
    let out = session.edit(|a, id, t| {
        let stroke = BrushStroke {
            session_id: id.into(),
            slice: req.slice,
            class: req.class,
            radius: req.radius,
            path: req.path,
            timestamp_ms: t,
        };
        Ok(a.apply_stroke(&stroke)?)
    })?;
    Ok(edit_response(out))
}

async fn post_polygon(State(app): AppRef, Path(s): Path<String>, Json(req): Json<PolygonRequest>) -> ApiResult<Json<EditResponse>> {
    let session = app.session(&s)?;
    let out = session.edit(|a, id, t| {
        let fill = PolygonFill {
            session_id: id.into(),
            class: req.class,
            vertices: req.vertices,
            first_slice: req.first_slice,
            last_slice: req.last_slice,
            timestamp_ms: t,
        };
        Ok(a.apply_polygon(&fill)?)
    })?;
    Ok(edit_response(out))
}

async fn post_accept(State(app): AppRef, Path(s): Path<String>, Json(req): Json<AcceptRequest>) -> ApiResult<Json<EditResponse>> {
    let session = app.session(&s)?;
    let out = tokio::task::spawn_blocking(move || session.accept(&req.slices, req.threshold, req.version))
        .await
        .map_err(|e| ServiceError::Internal(e.to_string()))??;
    Ok(edit_response(out))
}

#[derive(Debug, Deserialize)]
struct PredictionQuery {
    #[serde(default)]
    threshold: f64,
    generation: Option<u32>,
    step: Option<u64>,
}

async fn get_predictions(
    State(app): AppRef,
    Path((s, k)): Path<(String, usize)>,
    Query(q): Query<PredictionQuery>,
) -> ApiResult<Json<PredictionPayload>> {
    if !(0.0..=1.0).contains(&q.threshold) {
        return Err(ServiceError::BadRequest(format!("threshold {} outside [0, 1]", q.threshold)));
    }
    let version = match (q.generation, q.step) {
        (Some(g), Some(st)) => Some(ModelVersion::new(g, st)),
        (None, None) => None,
        _ => return Err(ServiceError::BadRequest("give both generation and step, or neither".into())),
    };
    let session = app.session(&s)?;
    let pred = tokio::task::spawn_blocking(move || session.prediction(k, version))
        .await
        .map_err(|e| ServiceError::Internal(e.to_string()))??;
    let threshold = q.threshold as f32;
    Ok(Json(PredictionPayload {
        slice: k,
        width: pred.width(),
        height: pred.height(),
        version: pred.version(),
        threshold: q.threshold,
        classes: pred.classes().to_vec(),
        confidence: pred.confidence().to_vec(),
        hidden: pred.hidden_mask(threshold),
    }))
}

async fn get_labels(State(app): AppRef, Path((s, k)): Path<(String, usize)>) -> ApiResult<Response> {
    let labels = app.session(&s)?.labels(k)?;
    Ok(([(header::CONTENT_TYPE, "application/octet-stream")], labels).into_response())
}

async fn get_config(State(app): AppRef, Path(s): Path<String>) -> ApiResult<Json<ArchConfig>> {
    Ok(Json(app.session(&s)?.config()))
}

async fn put_config(State(app): AppRef, Path(s): Path<String>, Json(config): Json<ArchConfig>) -> ApiResult<Json<SessionInfo>> {
    let session = app.session(&s)?;
    session.reconfigure(config)?;
    Ok(Json(session.info()))
}

async fn post_view(State(app): AppRef, Path(s): Path<String>, Json(req): Json<ViewRequest>) -> ApiResult<StatusCode> {
    app.session(&s)?.view(req.slice)?;
    Ok(StatusCode::NO_CONTENT)
}

async fn post_threshold(State(app): AppRef, Path(s): Path<String>, Json(req): Json<ThresholdRequest>) -> ApiResult<StatusCode> {
    app.session(&s)?.set_threshold(req.threshold)?;
    Ok(StatusCode::NO_CONTENT)
}

async fn post_pause(State(app): AppRef, Path(s): Path<String>) -> ApiResult<StatusCode> {
    app.session(&s)?.pause()?;
    Ok(StatusCode::NO_CONTENT)
}

async fn post_resume(State(app): AppRef, Path(s): Path<String>) -> ApiResult<StatusCode> {
    app.session(&s)?.resume()?;
    Ok(StatusCode::NO_CONTENT)
}

async fn post_end(State(app): AppRef, Path(s): Path<String>) -> ApiResult<StatusCode> {
    app.session(&s)?.end()?;
    Ok(StatusCode::NO_CONTENT)
}

async fn post_train(State(app): AppRef, Path(s): Path<String>, Json(req): Json<TrainRequest>) -> ApiResult<Json<TrainResponse>> {
    let session = app.session(&s)?;
    let epochs = tokio::task::spawn_blocking({
        let session = session.clone();
        move || session.train(req.epochs)
    })
    .await
    .map_err(|e| ServiceError::Internal(e.to_string()))??;
    let state = session.trainer_state();
    Ok(Json(TrainResponse { epochs, version: state.version, phase: state.phase }))
}

async fn get_log(State(app): AppRef, Path(s): Path<String>) -> ApiResult<Response> {
    let body = app.session(&s)?.log_jsonl();
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], body).into_response())
}

fn sse_event(e: &StreamEvent) -> Event {
    let v = e.version();
    Event::default()
        .event(e.name())
        .id(format!("{}.{}", v.generation, v.step))
        .json_data(e)
        .expect("stream events serialize")
}

/// Current status first, then trainer events whose version is newer than
/// anything already sent. Failures carry the unchanged current version.
pub fn event_stream(session: &Session) -> impl Stream<Item = StreamEvent> + Send + 'static {
    let rx = session.subscribe();
    let status = session.status_event();
    let last = status.version();
    let rest = stream::unfold((rx, last), |(mut rx, mut last)| async move {
        loop {
            match rx.recv().await {
                Ok(e) => {
                    let fresh = e.version() > last;
                    if fresh || matches!(e, StreamEvent::Failed { .. }) {
                        last = last.max(e.version());
                        return Some((e, (rx, last)));
                    }
                }
                // A slow reader skips to whatever comes next.
                Err(broadcast::error::RecvError::Lagged(_)) => continue,
                Err(broadcast::error::RecvError::Closed) => return None,
            }
        }
    });
    stream::once(async move { status }).chain(rest)
}

async fn get_events(
    State(app): AppRef,
    Path(s): Path<String>,
) -> ApiResult<Sse<impl Stream<Item = Result<Event, Infallible>>>> {
    let session = app.session(&s)?;
    if session.is_closed() {
        return Err(ServiceError::SessionClosed);
    }
    let events = event_stream(&session).map(|e| Ok(sse_event(&e)));
    Ok(Sse::new(events).keep_alive(KeepAlive::default()))
}
