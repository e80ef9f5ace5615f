#![allow(dead_code)]

use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde::de::DeserializeOwned;
use serde::Serialize;
use tower::ServiceExt;

use slicelab_core::cae::ArchConfig;
use slicelab_core::synth::{generate, SynthConfig, Synthetic};
use slicelab_service::wire::{SessionInfo, StreamEvent};
use slicelab_service::{router, AppState, TrainingMode};

pub fn small_config() -> ArchConfig {
    ArchConfig { filter_size: 3, filters_per_layer: vec![2], ..ArchConfig::default() }
}

pub fn synthetic(width: usize, height: usize, depth: usize, seed: u64) -> Synthetic {
    generate(&SynthConfig { width, height, depth, seed, ..SynthConfig::default() }).unwrap()
}

pub struct Client {
    pub router: Router,
}

pub struct Reply {
    pub status: StatusCode,
    pub headers: axum::http::HeaderMap,
    pub body: Vec<u8>,
}

impl Reply {
    pub fn json<T: DeserializeOwned>(&self) -> T {
        serde_json::from_slice(&self.body)
            .unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&self.body)))
    }

    pub fn error_code(&self) -> String {
        let v: serde_json::Value = self.json();
        v["error"].as_str().unwrap().to_string()
    }
}

impl Client {
    pub fn new(mode: TrainingMode, volumes: Vec<slicelab_core::volume::Volume>) -> Self {
        Self { router: router(Arc::new(AppState::new(volumes, mode))) }
    }

    pub async fn send(&self, method: Method, uri: &str, body: Option<Vec<u8>>) -> Reply {
        let mut req = Request::builder().method(method).uri(uri);
        if body.is_some() {
            req = req.header("content-type", "application/json");
        }
        let req = req.body(body.map(Body::from).unwrap_or_else(Body::empty)).unwrap();
        let resp = self.router.clone().oneshot(req).await.unwrap();
        let status = resp.status();
        let headers = resp.headers().clone();
        let body = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
        Reply { status, headers, body }
    }

    pub async fn get(&self, uri: &str) -> Reply {
        self.send(Method::GET, uri, None).await
    }

    pub async fn post<B: Serialize>(&self, uri: &str, body: &B) -> Reply {
        self.send(Method::POST, uri, Some(serde_json::to_vec(body).unwrap())).await
    }

    pub async fn put<B: Serialize>(&self, uri: &str, body: &B) -> Reply {
        self.send(Method::PUT, uri, Some(serde_json::to_vec(body).unwrap())).await
    }

    pub async fn session(&self, volume: &str, config: &ArchConfig, seed: u64) -> SessionInfo {
        let r = self
            .post("/sessions", &serde_json::json!({"reader_id": "r1", "volume_id": volume, "config": config, "seed": seed}))
            .await;
        assert_eq!(r.status, StatusCode::CREATED, "{}", String::from_utf8_lossy(&r.body));
        r.json()
    }

    /// Opens the event stream of session `s`.
    pub async fn events(&self, s: &str) -> EventReader {
        let req = Request::builder().uri(format!("/sessions/{s}/events")).body(Body::empty()).unwrap();
        let resp = self.router.clone().oneshot(req).await.unwrap();
        assert_eq!(resp.status(), StatusCode::OK);
        assert_eq!(resp.headers()["content-type"], "text/event-stream");
        EventReader { body: resp.into_body(), buffer: String::new() }
    }
}

/// Parses server-sent events off a response body.
pub struct EventReader {
    body: Body,
    buffer: String,
}

#[derive(Debug, Clone)]
pub struct SseMessage {
    pub event: String,
    pub id: String,
    pub data: StreamEvent,
}

impl EventReader {
    /// The next non-comment event, or `None` after `wait` without one.
    pub async fn next(&mut self, wait: Duration) -> Option<SseMessage> {
        let deadline = tokio::time::Instant::now() + wait;
        loop {
            while let Some(end) = self.buffer.find("\n\n") {
                let block: String = self.buffer.drain(..end + 2).collect();
                if let Some(m) = parse_block(&block) {
                    return Some(m);
                }
            }
            let frame = tokio::time::timeout_at(deadline, self.body.frame()).await.ok()??.ok()?;
            if let Ok(data) = frame.into_data() {
                self.buffer.push_str(std::str::from_utf8(&data).unwrap());
            }
        }
    }
}

fn parse_block(block: &str) -> Option<SseMessage> {
    let (mut event, mut id, mut data) = (None, None, String::new());
    for line in block.lines() {
        if let Some(v) = line.strip_prefix("event:") {
            event = Some(v.trim().to_string());
        } else if let Some(v) = line.strip_prefix("id:") {
            id = Some(v.trim().to_string());
        } else if let Some(v) = line.strip_prefix("data:") {
            data.push_str(v.trim_start());
        }
    }
    Some(SseMessage { event: event?, id: id?, data: serde_json::from_str(&data).unwrap() })
}
