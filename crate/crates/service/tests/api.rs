mod common;

use std::time::Duration;

use axum::http::StatusCode;
use serde_json::json;

use common::{small_config, synthetic, Client};
use slicelab_core::annotation::{replay, InteractionLog};
use slicelab_core::cae::{ArchConfig, ModelVersion};
use slicelab_core::volume::{Dims, Volume};
use slicelab_service::render::Window;
use slicelab_service::wire::{
    EditResponse, PredictionPayload, SessionInfo, StreamEvent, TrainResponse, VolumeInfo,
};
use slicelab_service::TrainingMode;

fn manual_client() -> (Client, Volume) {
    let s = synthetic(32, 32, 3, 5);
    (Client::new(TrainingMode::Manual, vec![s.volume.clone()]), s.volume)
}

#[tokio::test]
async fn volumes_and_slice_payloads() {
    let (c, vol) = manual_client();
    let list: Vec<VolumeInfo> = c.get("/volumes").await.json();
    assert_eq!(list.len(), 1);
    assert_eq!(list[0].id, vol.id());
    assert_eq!(list[0].dims, Dims::new(32, 32, 3));

    let raw = c.get(&format!("/volumes/{}/slices/2?format=raw", vol.id())).await;
    assert_eq!(raw.status, StatusCode::OK);
    assert_eq!(raw.headers["x-width"], "32");
    let values: Vec<i16> = raw.body.chunks_exact(2).map(|b| i16::from_le_bytes([b[0], b[1]])).collect();
    assert_eq!(values, vol.plane(2).unwrap());

    let png_reply = c.get(&format!("/volumes/{}/slices/2?level=-600&width=1500", vol.id())).await;
    assert_eq!(png_reply.headers["content-type"], "image/png");
    let mut reader = png::Decoder::new(std::io::Cursor::new(png_reply.body)).read_info().unwrap();
    let mut buf = vec![0; reader.output_buffer_size().unwrap()];
    reader.next_frame(&mut buf).unwrap();
    let expected: Vec<u8> = vol.plane(2).unwrap().iter().map(|&v| Window::default().apply(v)).collect();
    assert_eq!(buf, expected);

    assert_eq!(c.get(&format!("/volumes/{}/slices/3", vol.id())).await.error_code(), "slice_out_of_range");
    assert_eq!(c.get("/volumes/nope/slices/0").await.status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn session_creation_rules() {
    let (c, vol) = manual_client();
    let a = c.session(vol.id(), &small_config(), 1).await;
    let b = c.session(vol.id(), &small_config(), 1).await;
    assert_ne!(a.session_id, b.session_id);
    assert_eq!(a.session_id.len(), 32, "uuid v4 token");
    assert_eq!(a.version, ModelVersion::new(0, 0));

    let even = ArchConfig { filter_size: 4, ..small_config() };
    let r = c.post("/sessions", &json!({"reader_id": "r", "volume_id": vol.id(), "config": even})).await;
    assert_eq!((r.status, r.error_code().as_str()), (StatusCode::UNPROCESSABLE_ENTITY, "bad_config"));
    let r = c.post("/sessions", &json!({"reader_id": "r", "volume_id": "missing"})).await;
    assert_eq!(r.error_code(), "unknown_volume");
    assert_eq!(c.get("/sessions/0123/log").await.error_code(), "unknown_session");

    // Edits in one session leave the other untouched.
    let r = c.post(&format!("/sessions/{}/strokes", a.session_id), &json!({"slice": 0, "class": 1, "radius": 2, "path": [[5, 5]]})).await;
    assert_eq!(r.status, StatusCode::OK);
    let labels_b = c.get(&format!("/sessions/{}/labels/0", b.session_id)).await.body;
    assert!(labels_b.iter().all(|&v| v == 0));
    let log_b = c.get(&format!("/sessions/{}/log", b.session_id)).await;
    assert_eq!(String::from_utf8(log_b.body).unwrap().lines().count(), 1);
}

#[tokio::test]
async fn fresh_model_predicts_near_uniform() {
    let s = synthetic(64, 64, 2, 3);
    let c = Client::new(TrainingMode::Manual, vec![s.volume.clone()]);
    let info = c.session(s.volume.id(), &ArchConfig::default(), 9).await;
    let p: PredictionPayload = c.get(&format!("/sessions/{}/predictions/0", info.session_id)).await.json();
    let mean = p.confidence.iter().map(|&v| v as f64).sum::<f64>() / p.confidence.len() as f64;
    assert!(mean < 0.6, "mean max-confidence {mean}");
    assert_eq!(p.version, ModelVersion::new(0, 0));
}

#[tokio::test]
async fn stroke_response_and_closed_session() {
    let (c, vol) = manual_client();
    let info = c.session(vol.id(), &small_config(), 1).await;
    let s = &info.session_id;
    let r: EditResponse = c
        .post(&format!("/sessions/{s}/strokes"), &json!({"slice": 1, "class": 2, "radius": 1, "path": [[0, 0], [3, 0]]}))
        .await
        .json();
    // Discs are stamped at path points: 3 pixels at the corner, 4 at (3, 0).
    assert_eq!(r.summary.newly_labeled, 7);
    assert_eq!(r.labeled_pixels, 7);
    let labels = c.get(&format!("/sessions/{s}/labels/1")).await.body;
    assert_eq!(labels.iter().filter(|&&v| v == 2).count(), 7);

    let bad = c.post(&format!("/sessions/{s}/strokes"), &json!({"slice": 1, "class": 9, "radius": 1, "path": [[0, 0]]})).await;
    assert_eq!(bad.error_code(), "unknown_class");

    assert_eq!(c.post(&format!("/sessions/{s}/end"), &json!({})).await.status, StatusCode::NO_CONTENT);
    let closed = c.post(&format!("/sessions/{s}/strokes"), &json!({"slice": 1, "class": 2, "radius": 1, "path": [[9, 9]]})).await;
    assert_eq!((closed.status, closed.error_code().as_str()), (StatusCode::CONFLICT, "session_closed"));
    let events = c.get(&format!("/sessions/{s}/events")).await;
    assert_eq!(events.error_code(), "session_closed");
    let info: SessionInfo = c.get(&format!("/sessions/{s}")).await.json();
    assert!(info.closed);
}

#[tokio::test]
async fn scripted_ten_epochs_stream_ten_progress_events() {
    let (c, vol) = manual_client();
    let info = c.session(vol.id(), &small_config(), 4).await;
    let s = &info.session_id;
    let mut events = c.events(s).await;
    let first = events.next(Duration::from_secs(5)).await.unwrap();
    assert_eq!(first.event, "status");
    assert_eq!(first.id, "0.0");

    c.post(&format!("/sessions/{s}/polygons"), &json!({"class": 1, "vertices": [[2, 2], [20, 2], [20, 20]], "first_slice": 0, "last_slice": 1}))
        .await;
    let r: TrainResponse = c.post(&format!("/sessions/{s}/train"), &json!({"epochs": 10})).await.json();
    assert_eq!(r.epochs.len(), 10);
    assert_eq!(r.version, ModelVersion::new(0, 10));

    let mut last = ModelVersion::new(0, 0);
    let mut progress = 0;
    while let Some(m) = events.next(Duration::from_millis(500)).await {
        assert_eq!(m.event, "epoch");
        assert!(m.data.version() > last, "versions strictly increase");
        assert_eq!(m.id, format!("{}.{}", m.data.version().generation, m.data.version().step));
        last = m.data.version();
        progress += 1;
    }
    assert_eq!(progress, 10);

    // A new connection starts at the current version, with no replay.
    let mut again = c.events(s).await;
    let first = again.next(Duration::from_secs(5)).await.unwrap();
    match first.data {
        StreamEvent::Status { version, epochs_completed, .. } => {
            assert_eq!(version, ModelVersion::new(0, 10));
            assert_eq!(epochs_completed, 10);
        }
        other => panic!("expected status, got {other:?}"),
    }
    assert!(again.next(Duration::from_millis(300)).await.is_none());

    // Training logs one train_epoch event per epoch.
    let log = InteractionLog::read_jsonl(c.get(&format!("/sessions/{s}/log")).await.body.as_slice()).unwrap();
    assert_eq!(log.events().iter().filter(|e| e.payload.kind() == "train_epoch").count(), 10);
}

#[tokio::test]
async fn idle_training_runs_nothing() {
    let (c, vol) = manual_client();
    let info = c.session(vol.id(), &small_config(), 4).await;
    let r: TrainResponse = c.post(&format!("/sessions/{}/train", info.session_id), &json!({"epochs": 3})).await.json();
    assert!(r.epochs.is_empty());
    assert_eq!(r.version, ModelVersion::new(0, 0));

    let bg = Client::new(TrainingMode::Background, vec![vol.clone()]);
    let info = bg.session(vol.id(), &small_config(), 4).await;
    let r = bg.post(&format!("/sessions/{}/train", info.session_id), &json!({"epochs": 1})).await;
    assert_eq!(r.error_code(), "not_manual");
}

#[tokio::test]
async fn thresholded_predictions_match_per_pixel_flags() {
    let (c, vol) = manual_client();
    let info = c.session(vol.id(), &small_config(), 2).await;
    let s = &info.session_id;
    c.post(&format!("/sessions/{s}/strokes"), &json!({"slice": 0, "class": 3, "radius": 3, "path": [[1, 1], [30, 1]]})).await;
    c.post(&format!("/sessions/{s}/train"), &json!({"epochs": 5})).await;
    for t in [0.0, 0.45, 1.0] {
        let p: PredictionPayload = c.get(&format!("/sessions/{s}/predictions/0?threshold={t}")).await.json();
        assert_eq!(p.version, ModelVersion::new(0, 5));
        assert_eq!(p.classes.len(), 32 * 32);
        for (h, &conf) in p.hidden.iter().zip(&p.confidence) {
            assert_eq!(*h, conf < t as f32);
        }
        if t == 0.0 {
            assert!(p.hidden.iter().all(|h| !h));
        }
    }
    let r = c.get(&format!("/sessions/{s}/predictions/0?threshold=1.5")).await;
    assert_eq!(r.status, StatusCode::BAD_REQUEST);
    assert_eq!(c.get(&format!("/sessions/{s}/predictions/7")).await.error_code(), "slice_out_of_range");
    // Predictions are side-effect free.
    let log = c.get(&format!("/sessions/{s}/log")).await.body;
    let again = c.get(&format!("/sessions/{s}/log")).await.body;
    assert_eq!(log, again);
}

#[tokio::test]
async fn accept_uses_the_seen_version_and_rejects_stale_generations() {
    let (c, vol) = manual_client();
    let info = c.session(vol.id(), &small_config(), 2).await;
    let s = &info.session_id;
    c.post(&format!("/sessions/{s}/strokes"), &json!({"slice": 0, "class": 1, "radius": 2, "path": [[4, 4], [25, 25]]})).await;
    c.post(&format!("/sessions/{s}/train"), &json!({"epochs": 3})).await;
    let seen: PredictionPayload = c.get(&format!("/sessions/{s}/predictions/1?threshold=0.4")).await.json();
    let before = c.get(&format!("/sessions/{s}/labels/1")).await.body;

    // Training moves on; the reader still accepts what they saw.
    c.post(&format!("/sessions/{s}/train"), &json!({"epochs": 2})).await;
    let r = c.post(&format!("/sessions/{s}/accept"), &json!({"slices": [1], "threshold": 0.4, "version": seen.version})).await;
    assert_eq!(r.status, StatusCode::OK, "{}", String::from_utf8_lossy(&r.body));
    let r: EditResponse = r.json();
    let after = c.get(&format!("/sessions/{s}/labels/1")).await.body;
    let mut expected = before.clone();
    for (i, v) in expected.iter_mut().enumerate() {
        if *v == 0 && !seen.hidden[i] {
            *v = seen.classes[i];
        }
    }
    assert_eq!(after, expected);
    assert_eq!(r.summary.newly_labeled as usize, before.iter().zip(&after).filter(|(a, b)| a != b).count());

    // A configuration change starts a new generation.
    let cfg = ArchConfig { filters_per_layer: vec![3], ..small_config() };
    let info: SessionInfo = c.put(&format!("/sessions/{s}/config"), &cfg).await.json();
    assert_eq!(info.version, ModelVersion::new(1, 0));
    let echoed: ArchConfig = c.get(&format!("/sessions/{s}/config")).await.json();
    assert_eq!(echoed, cfg);
    let stale = c.post(&format!("/sessions/{s}/accept"), &json!({"slices": [1], "threshold": 0.4, "version": seen.version})).await;
    assert_eq!((stale.status, stale.error_code().as_str()), (StatusCode::CONFLICT, "version_mismatch"));

    // Within a generation, versions that have left the cache are refused.
    let gone = c.post(&format!("/sessions/{s}/accept"), &json!({"slices": [1], "threshold": 0.4, "version": {"generation": 1, "step": 7}})).await;
    assert_eq!(gone.error_code(), "stale_prediction");

    let bad = ArchConfig { num_classes: 4, ..small_config() };
    assert_eq!(c.put(&format!("/sessions/{s}/config"), &bad).await.error_code(), "bad_config");
}

#[tokio::test]
async fn reset_streams_a_newer_version() {
    let (c, vol) = manual_client();
    let info = c.session(vol.id(), &small_config(), 2).await;
    let s = &info.session_id;
    c.post(&format!("/sessions/{s}/strokes"), &json!({"slice": 0, "class": 1, "radius": 2, "path": [[4, 4]]})).await;
    c.post(&format!("/sessions/{s}/train"), &json!({"epochs": 2})).await;
    let mut events = c.events(s).await;
    assert_eq!(events.next(Duration::from_secs(5)).await.unwrap().id, "0.2");
    c.put(&format!("/sessions/{s}/config"), &small_config()).await;
    let reset = events.next(Duration::from_secs(5)).await.unwrap();
    assert_eq!(reset.event, "reset");
    assert_eq!(reset.data.version(), ModelVersion::new(1, 0));
    // Labels survive the reset, so training resumes in the new generation.
    let r: TrainResponse = c.post(&format!("/sessions/{s}/train"), &json!({"epochs": 1})).await.json();
    assert_eq!(r.version, ModelVersion::new(1, 1));
    assert_eq!(events.next(Duration::from_secs(5)).await.unwrap().id, "1.1");
}

#[tokio::test]
async fn downloaded_log_replays_to_final_labels() {
    let (c, vol) = manual_client();
    let info = c.session(vol.id(), &small_config(), 8).await;
    let s = &info.session_id;
    c.post(&format!("/sessions/{s}/view"), &json!({"slice": 1})).await;
    c.post(&format!("/sessions/{s}/strokes"), &json!({"slice": 1, "class": 2, "radius": 3, "path": [[3, 3], [12, 20], [28, 6]]})).await;
    c.post(&format!("/sessions/{s}/polygons"), &json!({"class": 3, "vertices": [[0, 0], [31, 0], [31, 4], [0, 4]], "first_slice": 0, "last_slice": 2})).await;
    c.post(&format!("/sessions/{s}/train"), &json!({"epochs": 4})).await;
    c.post(&format!("/sessions/{s}/threshold"), &json!({"threshold": 0.5})).await;
    let p: PredictionPayload = c.get(&format!("/sessions/{s}/predictions/1")).await.json();
    c.post(&format!("/sessions/{s}/accept"), &json!({"slices": [1], "threshold": 0.5, "version": p.version})).await;
    c.post(&format!("/sessions/{s}/strokes"), &json!({"slice": 1, "class": 0, "radius": 2, "path": [[12, 20]]})).await;
    c.post(&format!("/sessions/{s}/pause"), &json!({})).await;
    c.post(&format!("/sessions/{s}/resume"), &json!({})).await;
    c.post(&format!("/sessions/{s}/end"), &json!({})).await;

    let log = InteractionLog::read_jsonl(c.get(&format!("/sessions/{s}/log")).await.body.as_slice()).unwrap();
    assert!(log.is_ended());
    let kinds: Vec<_> = log.events().iter().map(|e| e.payload.kind()).collect();
    for k in ["session_start", "slice_change", "stroke", "polygon", "train_epoch", "threshold_change", "accept_predictions", "session_end"] {
        assert!(kinds.contains(&k), "missing {k}");
    }
    let state = replay(&log).unwrap();
    for k in 0..3 {
        let served = c.get(&format!("/sessions/{s}/labels/{k}")).await.body;
        assert_eq!(state.map.slice(k).unwrap(), served.as_slice());
    }
}
