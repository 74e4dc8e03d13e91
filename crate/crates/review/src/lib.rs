//! JSON-over-HTTP service for curating mined preference pairs.
//!
//! Routes:
//!
//! | method | path                     | body / query                                   |
//! |--------|--------------------------|------------------------------------------------|
//! | GET    | `/pairs`                 | `?status=pending&page=1&page_size=20`          |
//! | GET    | `/pairs/{id}`            |                                                |
//! | POST   | `/pairs/{id}/decision`   | `{decision, edited_text?, idempotency_key, reviewer?}` |
//! | GET    | `/stats`                 |                                                |
//! | GET    | `/media/{*path}`         | files under the corpus root, read-only         |
//!
//! Decisions are serialized through one queue lock and synced to the pair
//! log before the response is sent.

use std::net::SocketAddr;
use std::path::{Component, Path, PathBuf};
use std::sync::{Arc, Mutex};

use axum::extract::{Path as UrlPath, Query, Request, State};
use axum::http::{header, HeaderMap, HeaderValue, Method, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use mhb_core::miner::PairStatus;
use mhb_core::review::{review_context, DecisionRequest, Page, ReviewContext, ReviewError, ReviewQueue, ReviewStats};
use mhb_core::store::{Corpus, StoreError, PAIRS_FILE};
use serde::{Deserialize, Serialize};
use tower_http::cors::{AllowOrigin, Any, CorsLayer};
use tower_http::services::ServeDir;

pub const DEFAULT_PAGE_SIZE: usize = 20;
pub const REVIEWER_HEADER: &str = "x-reviewer";

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Review(#[from] ReviewError),
    #[error("invalid CORS origin {0:?}")]
    InvalidOrigin(String),
    #[error("server error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Default)]
pub struct ServiceConfig {
    pub corpus_root: PathBuf,
    /// Shared bearer token; `None` disables auth.
    pub token: Option<String>,
    /// Static UI files served for paths no API route matches.
    pub ui_dir: Option<PathBuf>,
    /// Allowed browser origin; any origin when `None`.
    pub cors_origin: Option<String>,
}

pub struct AppState {
    corpus: Corpus,
    queue: Mutex<ReviewQueue>,
    media_root: PathBuf,
    token: Option<String>,
}

impl AppState {
    /// Opens the corpus read-only and takes the pair log's writer lock.
    pub fn open(cfg: &ServiceConfig) -> Result<Self, ServiceError> {
        let corpus = Corpus::open(&cfg.corpus_root)?;
        let queue = ReviewQueue::open_writer(&cfg.corpus_root.join(PAIRS_FILE), corpus.t())?;
        Ok(Self {
            media_root: cfg.corpus_root.clone(),
            corpus,
            queue: Mutex::new(queue),
            token: cfg.token.clone(),
        })
    }

    fn queue(&self) -> std::sync::MutexGuard<'_, ReviewQueue> {
        self.queue.lock().unwrap_or_else(|p| p.into_inner())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }
}

impl From<ReviewError> for ApiError {
    fn from(e: ReviewError) -> Self {
        let (status, code) = match &e {
            ReviewError::UnknownPair(_) => (StatusCode::NOT_FOUND, "unknown_pair"),
            ReviewError::AlreadyDecided { .. } => (StatusCode::CONFLICT, "already_decided"),
            ReviewError::KeyConflict { .. } => (StatusCode::CONFLICT, "key_conflict"),
            ReviewError::UnparseableEdit(_) => (StatusCode::UNPROCESSABLE_ENTITY, "unparseable_edit"),
            ReviewError::InvalidPageSize(_) | ReviewError::InvalidPage => {
                (StatusCode::UNPROCESSABLE_ENTITY, "invalid_page")
            }
            ReviewError::ReadOnly | ReviewError::Store(_) => (StatusCode::INTERNAL_SERVER_ERROR, "storage"),
        };
        Self::new(status, code, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            error: self.code.to_string(),
            message: self.message,
        };
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

#[derive(Debug, Default, Deserialize)]
struct ListParams {
    status: Option<String>,
    page: Option<String>,
    page_size: Option<String>,
}

fn parse_param(name: &str, value: Option<&str>, default: usize) -> Result<usize, ApiError> {
    match value {
        None => Ok(default),
        Some(v) => v
            .parse()
            .map_err(|_| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_query", format!("{name}={v:?} is not a number"))),
    }
}

async fn list_pairs(State(st): State<Arc<AppState>>, Query(q): Query<ListParams>) -> ApiResult<Page<ReviewContext>> {
    let status = match q.status.as_deref() {
        None => Some(PairStatus::Pending),
        Some("all") => None,
        Some(s) => Some(
            s.parse::<PairStatus>()
                .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_query", e))?,
        ),
    };
    let page = parse_param("page", q.page.as_deref(), 1)?;
    let page_size = parse_param("page_size", q.page_size.as_deref(), DEFAULT_PAGE_SIZE)?;
    let pairs = st.queue().list(status, page, page_size)?;
    let items = pairs
        .items
        .iter()
        .map(|p| review_context(&st.corpus, p))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Json(Page {
        items,
        page: pairs.page,
        page_size: pairs.page_size,
        total: pairs.total,
    }))
}

async fn get_pair(State(st): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<ReviewContext> {
    let pair = st.queue().get(&id).cloned().ok_or(ReviewError::UnknownPair(id))?;
    Ok(Json(review_context(&st.corpus, &pair)?))
}

async fn decide(
    State(st): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    headers: HeaderMap,
    body: Result<Json<DecisionRequest>, axum::extract::rejection::JsonRejection>,
) -> ApiResult<mhb_core::miner::PreferencePair> {
    let Json(mut req) =
        body.map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_body", e.body_text()))?;
    if req.reviewer.is_none() {
        req.reviewer = headers
            .get(REVIEWER_HEADER)
            .and_then(|v| v.to_str().ok())
            .map(str::to_string);
    }
    // the log append syncs to disk; keep it off the async workers
    let pair = tokio::task::spawn_blocking(move || st.queue().decide(&id, &req))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))??;
    Ok(Json(pair))
}

async fn stats(State(st): State<Arc<AppState>>) -> Json<ReviewStats> {
    Json(st.queue().stats())
}

/// Maps a request path onto a file under `root`; rejects anything that could leave it.
pub fn resolve_media(root: &Path, rel: &str) -> Option<PathBuf> {
    let rel = Path::new(rel);
    if rel.as_os_str().is_empty() || !rel.components().all(|c| matches!(c, Component::Normal(_))) {
        return None;
    }
    let root = root.canonicalize().ok()?;
    let full = root.join(rel).canonicalize().ok()?;
    (full.starts_with(&root) && full.is_file()).then_some(full)
}

fn content_type(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("json") => "application/json",
        Some("txt") => "text/plain; charset=utf-8",
        _ => "application/octet-stream",
    }
}

async fn media(State(st): State<Arc<AppState>>, UrlPath(rel): UrlPath<String>) -> Result<Response, ApiError> {
    let path = resolve_media(&st.media_root, &rel)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "not_found", format!("no media at {rel}")))?;
    let bytes = tokio::fs::read(&path)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "storage", e.to_string()))?;
    Ok(([(header::CONTENT_TYPE, content_type(&path))], bytes).into_response())
}

async fn require_token(State(st): State<Arc<AppState>>, req: Request, next: Next) -> Response {
    if let Some(token) = &st.token {
        let ok = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .is_some_and(|t| t == token);
        if !ok {
            return ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "missing or wrong bearer token").into_response();
        }
    }
    next.run(req).await
}

pub fn router(state: Arc<AppState>, cfg: &ServiceConfig) -> Result<Router, ServiceError> {
    let origin = match &cfg.cors_origin {
        Some(o) => AllowOrigin::exact(HeaderValue::from_str(o).map_err(|_| ServiceError::InvalidOrigin(o.clone()))?),
        None => AllowOrigin::any(),
    };
    let cors = CorsLayer::new()
        .allow_origin(origin)
        .allow_methods([Method::GET, Method::POST])
        .allow_headers(Any);
    let api = Router::new()
        .route("/pairs", get(list_pairs))
        .route("/pairs/{id}", get(get_pair))
        .route("/pairs/{id}/decision", post(decide))
        .route("/stats", get(stats))
        .route("/media/{*path}", get(media))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_token))
        .with_state(state);
    let app = match &cfg.ui_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    };
    Ok(app.layer(cors))
}

/// Serves until ctrl-c.
pub async fn serve(addr: SocketAddr, cfg: ServiceConfig) -> Result<(), ServiceError> {
    let state = Arc::new(AppState::open(&cfg)?);
    let app = router(state, &cfg)?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("review service listening on http://{}", listener.local_addr()?);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
