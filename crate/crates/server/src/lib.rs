//! JSON REST service over the review store: the queue analysts work from,
//! record detail with every backend's verdict, resolution and metrics.
//!
//! Reads are open; mutations need `Authorization: Bearer <token>`. The store
//! is re-read before each request so batches run by other processes show up.

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crashqc_core::corpus::{CrashRecord, Label};
use crashqc_core::ensemble::{BackendResult, ReviewItem, ReviewStatus};
use crashqc_core::kwfilter::IndicatorRuleSet;
use crashqc_core::pipeline::PipelineConfig;
use crashqc_core::store::{Store, StoreError};

pub const DEFAULT_PAGE: usize = 50;
pub const MAX_PAGE: usize = 500;

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error(
        "no auth token configured; set service.auth_token or {}",
        crashqc_core::pipeline::AUTH_TOKEN_ENV
    )]
    NoToken,
    #[error(transparent)]
    Config(#[from] crashqc_core::pipeline::ConfigError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("bind {addr}: {source}")]
    Bind {
        addr: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Shared, read-mostly state behind every handler.
pub struct AppState {
    pub store: Store,
    pub records: HashMap<String, CrashRecord>,
    pub rules: IndicatorRuleSet,
    pub token: String,
}

impl AppState {
    pub fn new(
        store: Store,
        records: Vec<CrashRecord>,
        rules: IndicatorRuleSet,
        token: String,
    ) -> Self {
        store.attach_corpus(records.iter().map(|r| r.record_id.clone()));
        let records = records
            .into_iter()
            .map(|r| (r.record_id.clone(), r))
            .collect();
        AppState {
            store,
            records,
            rules,
            token,
        }
    }
}

pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({"error": self.message}))).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        let status = match &e {
            StoreError::UnknownRecord(_) | StoreError::UnknownItem(_) => StatusCode::NOT_FOUND,
            StoreError::AlreadyResolved(_)
            | StoreError::DuplicatePending(_)
            | StoreError::AlreadyProcessed { .. } => StatusCode::CONFLICT,
            StoreError::NotFlagged(_) => StatusCode::UNPROCESSABLE_ENTITY,
            StoreError::Io(_) | StoreError::Corrupt { .. } => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.to_string())
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

fn authorize(state: &AppState, headers: &HeaderMap) -> Result<(), ApiError> {
    let presented = headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .map(str::trim);
    match presented {
        Some(t) if !state.token.is_empty() && t == state.token => Ok(()),
        _ => Err(ApiError::new(
            StatusCode::UNAUTHORIZED,
            "missing or invalid bearer token",
        )),
    }
}

fn refresh(state: &AppState) -> Result<(), ApiError> {
    state.store.refresh().map_err(ApiError::from)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerSplit {
    pub yes: usize,
    pub no: usize,
    pub errors: usize,
}

fn split(item: &ReviewItem) -> AnswerSplit {
    let mut s = AnswerSplit::default();
    for v in &item.decision.verdicts {
        match v {
            BackendResult::Verdict(v) if v.answer.is_yes() => s.yes += 1,
            BackendResult::Verdict(_) => s.no += 1,
            BackendResult::Error(_) => s.errors += 1,
        }
    }
    s
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueueEntry {
    pub record_id: String,
    pub narrative: Option<String>,
    pub matched_terms: Vec<String>,
    pub status: ReviewStatus,
    pub reason: String,
    pub split: AnswerSplit,
    pub item: ReviewItem,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueuePage {
    pub status: ReviewStatus,
    pub total: usize,
    pub offset: usize,
    pub limit: usize,
    pub items: Vec<QueueEntry>,
}

#[derive(Debug, Deserialize)]
pub struct QueueParams {
    status: Option<String>,
    offset: Option<usize>,
    limit: Option<usize>,
}

fn parse_status(s: Option<&str>) -> Result<ReviewStatus, ApiError> {
    match s.unwrap_or("pending").to_ascii_lowercase().as_str() {
        "pending" => Ok(ReviewStatus::Pending),
        "skipped" => Ok(ReviewStatus::Skipped),
        "resolved" => Ok(ReviewStatus::Resolved),
        other => Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            format!("unknown status {other:?}"),
        )),
    }
}

async fn health(State(state): State<Arc<AppState>>) -> ApiResult<Value> {
    refresh(&state)?;
    let st = state.store.read();
    Ok(Json(json!({
        "status": "ok",
        "records": state.records.len(),
        "pending": st.queue(ReviewStatus::Pending).len(),
    })))
}

async fn queue(
    State(state): State<Arc<AppState>>,
    Query(q): Query<QueueParams>,
) -> ApiResult<QueuePage> {
    let status = parse_status(q.status.as_deref())?;
    let offset = q.offset.unwrap_or(0);
    let limit = q.limit.unwrap_or(DEFAULT_PAGE).clamp(1, MAX_PAGE);
    refresh(&state)?;
    let st = state.store.read();
    let all = st.queue(status);
    let items = all
        .iter()
        .skip(offset)
        .take(limit)
        .map(|it| {
            let record = state.records.get(&it.record_id);
            QueueEntry {
                record_id: it.record_id.clone(),
                narrative: record.map(|r| r.narrative.clone()),
                matched_terms: record
                    .map(|r| state.rules.passes(&r.narrative).1)
                    .unwrap_or_default(),
                status: it.status,
                reason: it.decision.reason.clone(),
                split: split(it),
                item: (*it).clone(),
            }
        })
        .collect();
    Ok(Json(QueuePage {
        status,
        total: all.len(),
        offset,
        limit,
        items,
    }))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecordView {
    pub record: CrashRecord,
    pub matched_terms: Vec<String>,
    /// Every backend's result from the latest ensemble decision.
    pub verdicts: Vec<BackendResult>,
    pub outcome: Option<String>,
    pub reason: Option<String>,
    pub review: Option<ReviewItem>,
    pub active_label: Option<Label>,
    pub label_history: Vec<Label>,
}

async fn record(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> ApiResult<RecordView> {
    let Some(record) = state.records.get(&id) else {
        return Err(ApiError::new(
            StatusCode::NOT_FOUND,
            format!("unknown record {id}"),
        ));
    };
    refresh(&state)?;
    let st = state.store.read();
    let decision = st.latest_decision(&id);
    Ok(Json(RecordView {
        record: record.clone(),
        matched_terms: state.rules.passes(&record.narrative).1,
        verdicts: decision.map(|d| d.verdicts.clone()).unwrap_or_default(),
        outcome: decision.map(|d| format!("{:?}", d.outcome)),
        reason: decision.map(|d| d.reason.clone()),
        review: st.review_item(&id).cloned(),
        active_label: st.active_label(&id).cloned(),
        label_history: st.label_history(&id).to_vec(),
    }))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResolveBody {
    pub is_secondary: bool,
    pub analyst: String,
    #[serde(default)]
    pub note: Option<String>,
}

async fn resolve(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    headers: HeaderMap,
    body: Result<Json<ResolveBody>, axum::extract::rejection::JsonRejection>,
) -> ApiResult<ReviewItem> {
    authorize(&state, &headers)?;
    let Json(body) = body.map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.body_text()))?;
    if body.analyst.trim().is_empty() {
        return Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            "analyst must not be empty",
        ));
    }
    let note = body.note.filter(|n| !n.trim().is_empty());
    Ok(Json(state.store.resolve(
        &id,
        body.is_secondary,
        body.analyst.trim(),
        note,
    )?))
}

async fn skip(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    headers: HeaderMap,
) -> ApiResult<ReviewItem> {
    authorize(&state, &headers)?;
    if !state.records.contains_key(&id) {
        return Err(ApiError::new(
            StatusCode::NOT_FOUND,
            format!("unknown record {id}"),
        ));
    }
    Ok(Json(state.store.skip(&id)?))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgreementView {
    pub agree: u64,
    pub disagree: u64,
    pub errored: u64,
    /// agree / (agree + disagree + errored); absent before any resolution.
    pub rate: Option<f64>,
}

async fn metrics(State(state): State<Arc<AppState>>) -> ApiResult<Value> {
    refresh(&state)?;
    let st = state.store.read();
    let agreement: BTreeMap<&String, AgreementView> = st
        .agreement()
        .iter()
        .map(|(id, a)| {
            let total = a.total();
            let rate = (total > 0).then(|| a.agree as f64 / total as f64);
            (
                id,
                AgreementView {
                    agree: a.agree,
                    disagree: a.disagree,
                    errored: a.errored,
                    rate,
                },
            )
        })
        .collect();
    Ok(Json(json!({
        "evaluations": st.evaluations(),
        "agreement": agreement,
        "queue": {
            "pending": st.queue(ReviewStatus::Pending).len(),
            "skipped": st.queue(ReviewStatus::Skipped).len(),
            "resolved": st.queue(ReviewStatus::Resolved).len(),
        },
        "last_run": st.runs().last(),
    })))
}

pub fn router(state: Arc<AppState>, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/health", get(health))
        .route("/review/queue", get(queue))
        .route("/records/{id}", get(record))
        .route("/review/{id}/resolve", post(resolve))
        .route("/review/{id}/skip", post(skip))
        .route("/metrics", get(metrics))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(tower_http::services::ServeDir::new(dir)),
        None => api,
    }
}

/// Builds the state a config describes.
pub fn state_from_config(config: &PipelineConfig) -> Result<AppState, ServeError> {
    let token = config
        .service
        .auth_token
        .clone()
        .filter(|t| !t.is_empty())
        .ok_or(ServeError::NoToken)?;
    let ingested = config.load_corpus()?;
    let rules = config.indicator_rules()?;
    let store = Store::open(&config.store.dir)?;
    Ok(AppState::new(store, ingested.records, rules, token))
}

/// Binds and serves until ctrl-c.
pub async fn serve(config: &PipelineConfig) -> Result<(), ServeError> {
    let state = Arc::new(state_from_config(config)?);
    let addr = &config.service.bind;
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|source| ServeError::Bind {
            addr: addr.clone(),
            source,
        })?;
    let local: SocketAddr = listener.local_addr()?;
    if !local.ip().is_loopback() {
        log::warn!("serving on non-loopback address {local}");
    }
    log::info!("listening on http://{local}");
    axum::serve(listener, router(state, config.service.static_dir.clone()))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
