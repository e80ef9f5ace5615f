//! Session-oriented HTTP service for interactive annotation.
//!
//! Each session owns a label map, an interaction log and a background
//! trainer. Edits and reads are plain HTTP; training progress and new
//! prediction versions are pushed over one server-sent-event stream per
//! session. `docs/protocol.md` documents every route and body.

pub mod error;
pub mod render;
pub mod routes;
pub mod session;
pub mod wire;

use std::net::SocketAddr;
use std::sync::Arc;

pub use error::ServiceError;
pub use routes::{event_stream, router, AppState};
pub use session::{Real, Session, TrainingMode};

/// Serves `state` on `addr` until the process receives Ctrl-C.
pub async fn serve(state: Arc<AppState>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
