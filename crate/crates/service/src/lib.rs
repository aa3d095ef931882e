//! HTTP service over a loaded model and exemplar database: ranked
//! predictions, token scores, exemplar audits, a per-session bias offset
//! and append-only annotation capture.

mod annotations;
mod api;
mod error;
mod state;

use std::net::SocketAddr;
use std::sync::Arc;

pub use annotations::{Annotation, AnnotationInput, AnnotationStore, ExemplarContext, Verdict};
pub use api::{
    router, DocResponse, HealthResponse, OffsetRequest, OffsetResponse, PredictRequest, PredictResponse,
    TokensResponse, ANNOTATOR_HEADER, SESSION_HEADER,
};
pub use error::ApiError;
pub use state::{AppState, ServiceConfig, SessionOffset, StoredDoc};

/// Bind `addr` and serve until the process stops.
pub async fn serve(state: Arc<AppState>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(state)).await
}
