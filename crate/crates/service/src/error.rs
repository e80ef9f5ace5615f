use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::Serialize;
use thiserror::Error;

use slicelab_core::annotation::AnnotationError;
use slicelab_core::cae::{CaeError, ModelVersion};
use slicelab_core::trainer::TrainerError;
use slicelab_core::volume::VolumeError;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("unknown volume {0}")]
    UnknownVolume(String),
    #[error("unknown session")]
    UnknownSession,
    #[error("invalid architecture: {0}")]
    BadConfig(String),
    #[error("session is closed")]
    SessionClosed,
    #[error("slice {index} out of range for depth {depth}")]
    SliceOutOfRange { index: usize, depth: usize },
    #[error("prediction version {requested} is no longer available (current {current})")]
    StalePrediction { requested: ModelVersion, current: ModelVersion },
    #[error("manual training is disabled; the session trains in the background")]
    NotManual,
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error(transparent)]
    Annotation(#[from] AnnotationError),
    #[error("model error: {0}")]
    Model(#[from] CaeError),
    #[error("internal error: {0}")]
    Internal(String),
}

impl From<TrainerError> for ServiceError {
    fn from(e: TrainerError) -> Self {
        match e {
            TrainerError::SessionClosed => Self::SessionClosed,
            TrainerError::Config(c) => Self::BadConfig(c.to_string()),
            other => Self::Internal(other.to_string()),
        }
    }
}

impl From<VolumeError> for ServiceError {
    fn from(e: VolumeError) -> Self {
        match e {
            VolumeError::SliceOutOfRange { index, depth } => Self::SliceOutOfRange { index, depth },
            other => Self::Internal(other.to_string()),
        }
    }
}

impl ServiceError {
    /// Stable machine-readable name sent as `error` in JSON bodies.
    pub fn code(&self) -> &'static str {
        match self {
            Self::UnknownVolume(_) => "unknown_volume",
            Self::UnknownSession => "unknown_session",
            Self::BadConfig(_) => "bad_config",
            Self::SessionClosed | Self::Annotation(AnnotationError::SessionClosed) => "session_closed",
            Self::SliceOutOfRange { .. } => "slice_out_of_range",
            Self::StalePrediction { .. } => "stale_prediction",
            Self::NotManual => "not_manual",
            Self::BadRequest(_) => "bad_request",
            Self::Annotation(a) => match a {
                AnnotationError::VersionMismatch { .. } => "version_mismatch",
                AnnotationError::OutOfBounds(_) => "out_of_bounds",
                AnnotationError::UnknownClass { .. } => "unknown_class",
                AnnotationError::InvalidStroke(_) => "invalid_stroke",
                AnnotationError::DegeneratePolygon(_) => "degenerate_polygon",
                AnnotationError::BadThreshold(_) => "bad_threshold",
                AnnotationError::DimensionMismatch(_) => "dimension_mismatch",
                _ => "annotation_error",
            },
            Self::Model(_) => "model_error",
            Self::Internal(_) => "internal",
        }
    }

    pub fn status(&self) -> StatusCode {
        match self {
            Self::UnknownVolume(_) | Self::UnknownSession | Self::SliceOutOfRange { .. } => StatusCode::NOT_FOUND,
            Self::BadConfig(_) => StatusCode::UNPROCESSABLE_ENTITY,
            Self::SessionClosed | Self::StalePrediction { .. } | Self::NotManual => StatusCode::CONFLICT,
            Self::Annotation(AnnotationError::SessionClosed | AnnotationError::VersionMismatch { .. }) => {
                StatusCode::CONFLICT
            }
            Self::Annotation(AnnotationError::TimeWentBackwards { .. }) => StatusCode::INTERNAL_SERVER_ERROR,
            Self::Annotation(_) | Self::BadRequest(_) => StatusCode::BAD_REQUEST,
            Self::Model(_) | Self::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

#[derive(Serialize)]
struct ErrorBody {
    error: &'static str,
    message: String,
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let body = ErrorBody { error: self.code(), message: self.to_string() };
        (self.status(), Json(body)).into_response()
    }
}
