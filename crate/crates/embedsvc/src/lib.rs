//! Embedding export, PCA projection and a read-only HTTP service.
//!
//! Tables are loaded once at startup and never written back. Every
//! response is JSON; unknown attributes and metadata keys answer 404 with
//! a structured error body.

pub mod pca;
pub mod service;
pub mod store;

use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;

pub use pca::{project_pca, Projection};
pub use service::{router, sample_seed, AppState, ProjectionQuery, ServiceConfig};
pub use store::{Store, Table};

#[derive(Debug, thiserror::Error)]
pub enum SvcError {
    #[error("unknown attribute `{0}`")]
    UnknownAttribute(String),
    #[error("attribute `{attribute}` has no metadata key `{key}`")]
    UnknownMetadataKey { attribute: String, key: String },
    #[error("{0}")]
    BadRequest(String),
    #[error(transparent)]
    Core(#[from] txn_foundry::Error),
}

impl SvcError {
    pub fn status(&self) -> StatusCode {
        match self {
            SvcError::UnknownAttribute(_) | SvcError::UnknownMetadataKey { .. } => StatusCode::NOT_FOUND,
            SvcError::BadRequest(_) => StatusCode::BAD_REQUEST,
            SvcError::Core(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            SvcError::UnknownAttribute(_) => "unknown_attribute",
            SvcError::UnknownMetadataKey { .. } => "unknown_metadata_key",
            SvcError::BadRequest(_) => "bad_request",
            SvcError::Core(_) => "internal",
        }
    }
}

impl IntoResponse for SvcError {
    fn into_response(self) -> Response {
        let body = serde_json::json!({
            "error": { "code": self.code(), "status": self.status().as_u16(), "message": self.to_string() }
        });
        (self.status(), Json(body)).into_response()
    }
}
