use std::collections::BTreeMap;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, Request, State};
use axum::http::header::AUTHORIZATION;
use axum::http::HeaderMap;
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use multiblade::artifacts::{rank_labels, text_doc_id, DocRef, LabelPrediction};
use multiblade::corpus::{tokenize, DEFAULT_MAX_LEN};
use multiblade::model::MaskMode;
use multiblade::report::{AuditPayload, TokenView};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::annotations::{Annotation, AnnotationInput, Verdict};
use crate::error::ApiError;
use crate::state::{AppState, SessionOffset, StoredDoc};

/// Session key header; requests without it share the `default` session.
pub const SESSION_HEADER: &str = "x-session";
/// Fallback annotator id when the body names none.
pub const ANNOTATOR_HEADER: &str = "x-annotator";

type Shared = State<Arc<AppState>>;

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/predict", post(predict))
        .route("/docs/{id}", get(document))
        .route("/docs/{id}/labels/{code}/tokens", get(tokens))
        .route("/docs/{id}/labels/{code}/audit", get(audit))
        .route("/session/offset", get(get_offset).put(put_offset))
        .route("/annotations", get(list_annotations).post(add_annotation))
        .layer(middleware::from_fn_with_state(state.clone(), auth))
        .with_state(state)
}

async fn auth(State(st): Shared, req: Request, next: Next) -> Response {
    if let Some(token) = &st.config.token {
        let given = req
            .headers()
            .get(AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        if given != Some(token.as_str()) {
            return ApiError::Unauthorized.into_response();
        }
    }
    next.run(req).await
}

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::BadRequest(format!("invalid request body: {e}")))
}

fn session_key(headers: &HeaderMap) -> String {
    headers
        .get(SESSION_HEADER)
        .and_then(|v| v.to_str().ok())
        .filter(|s| !s.is_empty())
        .unwrap_or("default")
        .to_string()
}

#[derive(Debug, Serialize, Deserialize)]
pub struct HealthResponse {
    pub model_hash: Option<String>,
    pub labels: usize,
    pub database: bool,
    pub database_records: usize,
}

async fn health(State(st): Shared) -> Json<HealthResponse> {
    let a = st.artifacts.as_deref();
    let db = a.and_then(|a| a.database.as_ref());
    Json(HealthResponse {
        model_hash: st.model_hash(),
        labels: a.map_or(0, |a| a.labels.len()),
        database: db.is_some(),
        database_records: db.map_or(0, |d| d.len()),
    })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictRequest {
    pub text: String,
    /// Defaults to an id derived from the text.
    #[serde(default)]
    pub doc_id: Option<String>,
}

#[derive(Debug, Deserialize)]
struct TopK {
    top_k: Option<usize>,
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictResponse {
    pub model_hash: String,
    pub doc_id: String,
    pub offset: f64,
    pub labels: Vec<LabelPrediction>,
}

async fn predict(
    State(st): Shared,
    Query(q): Query<TopK>,
    headers: HeaderMap,
    body: Bytes,
) -> Result<Json<PredictResponse>, ApiError> {
    let a = st.artifacts()?;
    let req: PredictRequest = parse_body(&body)?;
    if req.text.trim().is_empty() {
        return Err(ApiError::BadRequest("text is empty".into()));
    }
    let key = session_key(&headers);
    let bias = st.bias(&key)?;
    let tokens = tokenize(&req.text, DEFAULT_MAX_LEN);
    let analysis = a.analyze(&tokens, &bias)?;
    let doc_id = req.doc_id.unwrap_or_else(|| text_doc_id(&req.text));
    let labels = rank_labels(&a.labels, &analysis.inference, &bias, q.top_k.or(st.config.top_k));
    st.insert_doc(doc_id.clone(), StoredDoc { tokens, gold: None });
    Ok(Json(PredictResponse {
        model_hash: a.model_hash.clone(),
        doc_id,
        offset: bias.global,
        labels,
    }))
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
pub struct DocResponse {
    pub model_hash: String,
    pub doc_id: String,
    pub tokens: Vec<String>,
    pub gold: Option<Vec<String>>,
    pub offset: f64,
    pub labels: Vec<LabelPrediction>,
}

async fn document(
    State(st): Shared,
    Path(id): Path<String>,
    Query(q): Query<TopK>,
    headers: HeaderMap,
) -> Result<Json<DocResponse>, ApiError> {
    let a = st.artifacts()?;
    let doc = st.doc(&id)?;
    let bias = st.bias(&session_key(&headers))?;
    let analysis = a.analyze(&doc.tokens, &bias)?;
    Ok(Json(DocResponse {
        model_hash: a.model_hash.clone(),
        doc_id: id,
        tokens: doc.tokens.clone(),
        gold: doc
            .gold
            .as_ref()
            .map(|g| g.iter().map(|&c| a.labels.code(c).to_string()).collect()),
        offset: bias.global,
        labels: rank_labels(&a.labels, &analysis.inference, &bias, q.top_k.or(st.config.top_k)),
    }))
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
pub struct TokensResponse {
    pub model_hash: String,
    pub doc_id: String,
    pub code: String,
    pub mode: MaskMode,
    pub tokens: Vec<TokenView>,
}

async fn tokens(State(st): Shared, Path((id, code)): Path<(String, String)>) -> Result<Json<TokensResponse>, ApiError> {
    let a = st.artifacts()?;
    let doc = st.doc(&id)?;
    let label = a.label_id(&code)?;
    Ok(Json(TokensResponse {
        model_hash: a.model_hash.clone(),
        doc_id: id,
        code,
        mode: a.mask_mode(),
        tokens: a.token_views(&doc.tokens, label)?,
    }))
}

#[derive(Debug, Deserialize)]
struct AuditQuery {
    #[serde(default)]
    force: bool,
    tau: Option<f64>,
}

async fn audit(
    State(st): Shared,
    Path((id, code)): Path<(String, String)>,
    Query(q): Query<AuditQuery>,
    headers: HeaderMap,
) -> Result<Json<AuditPayload>, ApiError> {
    let a = st.artifacts()?;
    let doc = st.doc(&id)?;
    let label = a.label_id(&code)?;
    a.database()?;
    let tau = q.tau.unwrap_or(st.config.tau);
    if !tau.is_finite() {
        return Err(ApiError::BadRequest(format!("tau must be finite, got {tau}")));
    }
    let bias = st.bias(&session_key(&headers))?;
    let doc_ref = DocRef {
        doc_id: &id,
        tokens: &doc.tokens,
        gold: doc.gold.as_ref(),
    };
    let payload = a.audit(doc_ref, label, &bias, tau, st.config.absent)?;
    if payload.query_negative && !q.force {
        return Err(ApiError::Unprocessable(format!(
            "label {code} is not predicted for {id} at offset {}; pass force=true to audit it anyway",
            payload.offset
        )));
    }
    Ok(Json(payload))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OffsetRequest {
    pub value: f64,
    #[serde(default)]
    pub per_label: BTreeMap<String, f64>,
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
pub struct OffsetResponse {
    pub model_hash: Option<String>,
    pub session: String,
    pub value: f64,
    pub per_label: BTreeMap<String, f64>,
}

fn offset_response(st: &AppState, session: String, o: SessionOffset) -> OffsetResponse {
    OffsetResponse {
        model_hash: st.model_hash(),
        session,
        value: o.value,
        per_label: o.per_label,
    }
}

async fn get_offset(State(st): Shared, headers: HeaderMap) -> Json<OffsetResponse> {
    let key = session_key(&headers);
    let o = st.session(&key);
    Json(offset_response(&st, key, o))
}

async fn put_offset(State(st): Shared, headers: HeaderMap, body: Bytes) -> Result<Json<OffsetResponse>, ApiError> {
    let req: OffsetRequest = parse_body(&body)?;
    if !req.value.is_finite() || req.per_label.values().any(|v| !v.is_finite()) {
        return Err(ApiError::BadRequest("offsets must be finite".into()));
    }
    if !req.per_label.is_empty() {
        let a = st.artifacts()?;
        for code in req.per_label.keys() {
            if a.labels.id(code).is_none() {
                return Err(ApiError::BadRequest(format!("unknown label code {code:?}")));
            }
        }
    }
    let key = session_key(&headers);
    let o = SessionOffset {
        value: req.value,
        per_label: req.per_label,
    };
    st.set_session(&key, o.clone());
    Ok(Json(offset_response(&st, key, o)))
}

#[derive(Debug, Deserialize)]
struct DocFilter {
    doc: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AnnotationList {
    pub model_hash: Option<String>,
    pub annotations: Vec<Annotation>,
}

async fn list_annotations(State(st): Shared, Query(q): Query<DocFilter>) -> Json<AnnotationList> {
    Json(AnnotationList {
        model_hash: st.model_hash(),
        annotations: st.annotations.query(q.doc.as_deref()),
    })
}

async fn add_annotation(State(st): Shared, headers: HeaderMap, body: Bytes) -> Result<Json<Annotation>, ApiError> {
    let a = st.artifacts()?;
    let input: AnnotationInput = parse_body(&body)?;
    if input.doc_id.trim().is_empty() {
        return Err(ApiError::BadRequest("doc_id is empty".into()));
    }
    if a.labels.id(&input.code).is_none() {
        return Err(ApiError::BadRequest(format!("unknown label code {:?}", input.code)));
    }
    if let Verdict::RelabelTo(target) = &input.verdict {
        if a.labels.id(target).is_none() {
            return Err(ApiError::BadRequest(format!("unknown relabel target {target:?}")));
        }
    }
    if let Some(ctx) = &input.context {
        if ctx.probs.iter().any(|p| !p.is_finite()) {
            return Err(ApiError::BadRequest("context probabilities must be finite".into()));
        }
    }
    let annotator = input
        .annotator
        .clone()
        .or_else(|| {
            headers
                .get(ANNOTATOR_HEADER)
                .and_then(|v| v.to_str().ok())
                .map(str::to_string)
        })
        .unwrap_or_else(|| "anonymous".into());
    let rec = st
        .annotations
        .append(input, annotator, &a.model_hash)
        .map_err(|e| ApiError::Internal(format!("annotation log: {e}")))?;
    Ok(Json(rec))
}
