//! HTTP batch scoring over shared, read-only graph and lexicon configs.
//!
//! Endpoints: `POST /v1/score`, `POST /v1/classify`, `GET /v1/graph/{id}`
//! and `GET /healthz`. Configs are loaded once at startup and never mutated,
//! so handlers need no locking.

use std::collections::{BTreeMap, HashSet};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path as UrlPath, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use pathwise_core::reward::{score_turns, ScoredTurn};
use pathwise_core::{Category, Lexicon, ReasoningGraph, RewardBreakdown, RewardConfig, Step};

pub const DEFAULT_CONFIG_ID: &str = "bma-default";
pub const DEFAULT_MAX_BATCH: usize = 1024;
pub const AUTH_TOKEN_ENV: &str = "PATHWISE_AUTH_TOKEN";

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Config { path: PathBuf, message: String },
}

/// Graphs and lexicons addressable by id.
#[derive(Debug, Clone)]
pub struct Registry {
    graphs: BTreeMap<String, ReasoningGraph>,
    lexicons: BTreeMap<String, Lexicon>,
}

impl Registry {
    /// Only the shipped configs, under [`DEFAULT_CONFIG_ID`].
    pub fn bma_default() -> Self {
        Registry {
            graphs: BTreeMap::from([(DEFAULT_CONFIG_ID.to_string(), ReasoningGraph::bma_default())]),
            lexicons: BTreeMap::from([(DEFAULT_CONFIG_ID.to_string(), Lexicon::bma_default())]),
        }
    }

    /// Shipped configs plus `graphs/*.toml` and `lexicons/*.toml` under
    /// `dir`, each keyed by file stem. A file named like a shipped config
    /// replaces it.
    pub fn load_dir(dir: &Path) -> Result<Self, ServiceError> {
        let mut reg = Self::bma_default();
        for (id, path, text) in toml_files(&dir.join("graphs"))? {
            let g = ReasoningGraph::load(&text).map_err(|e| ServiceError::Config { path, message: e.to_string() })?;
            reg.graphs.insert(id, g);
        }
        for (id, path, text) in toml_files(&dir.join("lexicons"))? {
            let l = Lexicon::load(&text).map_err(|e| ServiceError::Config { path, message: e.to_string() })?;
            reg.lexicons.insert(id, l);
        }
        Ok(reg)
    }

    pub fn graph(&self, id: &str) -> Option<&ReasoningGraph> {
        self.graphs.get(id)
    }

    pub fn lexicon(&self, id: &str) -> Option<&Lexicon> {
        self.lexicons.get(id)
    }

    pub fn graph_ids(&self) -> Vec<String> {
        self.graphs.keys().cloned().collect()
    }

    pub fn lexicon_ids(&self) -> Vec<String> {
        self.lexicons.keys().cloned().collect()
    }
}

fn toml_files(dir: &Path) -> Result<Vec<(String, PathBuf, String)>, ServiceError> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| ServiceError::Io { path, source }
    };
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(io(dir))? {
        let path = entry.map_err(io(dir))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("toml") {
            continue;
        }
        let Some(id) = path.file_stem().and_then(|s| s.to_str()).map(str::to_string) else {
            continue;
        };
        let text = std::fs::read_to_string(&path).map_err(io(&path))?;
        out.push((id, path, text));
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub max_batch: usize,
    /// Required as `Authorization: Bearer <token>` on `/v1/*` when set.
    pub auth_token: Option<String>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig { max_batch: DEFAULT_MAX_BATCH, auth_token: None }
    }
}

impl ServiceConfig {
    /// Defaults with the auth token taken from [`AUTH_TOKEN_ENV`].
    pub fn from_env() -> Self {
        let auth_token = std::env::var(AUTH_TOKEN_ENV).ok().filter(|t| !t.is_empty());
        ServiceConfig { auth_token, ..Default::default() }
    }
}

#[derive(Clone)]
pub struct AppState {
    registry: Arc<Registry>,
    config: Arc<ServiceConfig>,
}

impl AppState {
    pub fn new(registry: Registry, config: ServiceConfig) -> Self {
        AppState { registry: Arc::new(registry), config: Arc::new(config) }
    }
}

/// Error body: `{"error": {"status": .., "message": ..}}`.
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError { status, message: message.into() }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({ "error": { "status": self.status.as_u16(), "message": self.message } });
        (self.status, Json(body)).into_response()
    }
}

fn default_id() -> String {
    DEFAULT_CONFIG_ID.to_string()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreRequest {
    #[serde(default = "default_id")]
    pub graph_id: String,
    #[serde(default = "default_id")]
    pub lexicon_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward_config: Option<RewardConfig>,
    /// Items are parsed one by one so that a malformed conversation only
    /// fails itself.
    pub conversations: Vec<Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreConversation {
    pub id: String,
    pub turns: Vec<ScoredTurn>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreResult {
    pub id: String,
    pub status: u16,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub breakdown: Option<RewardBreakdown>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicted_categories: Option<Vec<Category>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_categories: Option<Vec<Category>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub server_version: String,
    pub graph_id: String,
    pub graph_hash: String,
    pub lexicon_id: String,
    pub lexicon_hash: String,
    pub config_hash: String,
    pub results: Vec<ScoreResult>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifyRequest {
    #[serde(default = "default_id")]
    pub lexicon_id: String,
    pub step: String,
    pub texts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifyResponse {
    pub lexicon_hash: String,
    pub step: Step,
    pub categories: Vec<Category>,
    pub matched_keywords: Vec<Option<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    pub step: Step,
    pub categories: Vec<Category>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphInfo {
    pub id: String,
    pub version: String,
    pub hash: String,
    pub steps: Vec<StepInfo>,
    pub paths: Vec<Vec<Category>>,
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/v1/score", post(score))
        .route("/v1/classify", post(classify))
        .route("/v1/graph/{id}", get(graph_info))
        .route("/healthz", get(health))
        .layer(DefaultBodyLimit::max(256 * 1024 * 1024))
        .with_state(state)
}

fn check_auth(state: &AppState, headers: &HeaderMap) -> Result<(), ApiError> {
    let Some(token) = &state.config.auth_token else {
        return Ok(());
    };
    let given = headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "));
    if given == Some(token.as_str()) {
        Ok(())
    } else {
        Err(ApiError::new(StatusCode::UNAUTHORIZED, "missing or invalid bearer token"))
    }
}

fn parse_body<T: serde::de::DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("malformed request: {e}")))
}

/// Scores a parsed request without going through HTTP. The handler is a
/// thin wrapper around this.
pub fn score_request(registry: &Registry, config: &ServiceConfig, req: ScoreRequest) -> Result<ScoreResponse, ApiError> {
    let graph = registry
        .graph(&req.graph_id)
        .ok_or_else(|| ApiError::not_found(format!("unknown graph id `{}`", req.graph_id)))?;
    let lexicon = registry
        .lexicon(&req.lexicon_id)
        .ok_or_else(|| ApiError::not_found(format!("unknown lexicon id `{}`", req.lexicon_id)))?;
    if req.conversations.len() > config.max_batch {
        return Err(ApiError::new(
            StatusCode::PAYLOAD_TOO_LARGE,
            format!("batch of {} exceeds maximum {}", req.conversations.len(), config.max_batch),
        ));
    }
    let reward = req.reward_config.unwrap_or_default();
    reward.validate().map_err(|e| ApiError::bad_request(e.to_string()))?;

    let mut seen = HashSet::new();
    let mut items = Vec::with_capacity(req.conversations.len());
    for (i, raw) in req.conversations.into_iter().enumerate() {
        let id = raw
            .get("id")
            .and_then(Value::as_str)
            .ok_or_else(|| ApiError::bad_request(format!("conversation {i} has no string id")))?
            .to_string();
        if !seen.insert(id.clone()) {
            return Err(ApiError::bad_request(format!("duplicate conversation id `{id}`")));
        }
        items.push((id, raw));
    }

    let results: Vec<ScoreResult> = items
        .into_par_iter()
        .map(|(id, raw)| score_item(graph, lexicon, &reward, id, raw))
        .collect();

    Ok(ScoreResponse {
        server_version: pathwise_core::VERSION.to_string(),
        graph_id: req.graph_id,
        graph_hash: graph.hash().to_string(),
        lexicon_id: req.lexicon_id,
        lexicon_hash: lexicon.hash().to_string(),
        config_hash: reward.hash(),
        results,
    })
}

fn score_item(graph: &ReasoningGraph, lexicon: &Lexicon, reward: &RewardConfig, id: String, raw: Value) -> ScoreResult {
    let failed = |id: String, error: String| ScoreResult {
        id,
        status: StatusCode::UNPROCESSABLE_ENTITY.as_u16(),
        breakdown: None,
        predicted_categories: None,
        target_categories: None,
        error: Some(error),
    };
    let conv: ScoreConversation = match serde_json::from_value(raw) {
        Ok(c) => c,
        Err(e) => return failed(id, format!("malformed conversation: {e}")),
    };
    match score_turns(graph, lexicon, &conv.turns, reward) {
        Ok(scored) => ScoreResult {
            id,
            status: StatusCode::OK.as_u16(),
            breakdown: Some(scored.breakdown),
            predicted_categories: Some(scored.predicted_categories),
            target_categories: Some(scored.target_categories),
            error: None,
        },
        Err(e) => failed(id, e.to_string()),
    }
}

async fn score(State(state): State<AppState>, headers: HeaderMap, body: Bytes) -> Result<Json<ScoreResponse>, ApiError> {
    check_auth(&state, &headers)?;
    let req: ScoreRequest = parse_body(&body)?;
    let n = req.conversations.len();
    let resp = tokio::task::spawn_blocking(move || score_request(&state.registry, &state.config, req))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    tracing::debug!(conversations = n, "scored batch");
    Ok(Json(resp))
}

async fn classify(State(state): State<AppState>, headers: HeaderMap, body: Bytes) -> Result<Json<ClassifyResponse>, ApiError> {
    check_auth(&state, &headers)?;
    let req: ClassifyRequest = parse_body(&body)?;
    let lexicon = state
        .registry
        .lexicon(&req.lexicon_id)
        .ok_or_else(|| ApiError::not_found(format!("unknown lexicon id `{}`", req.lexicon_id)))?;
    let step: Step = req.step.parse().map_err(|e: pathwise_core::graph::UnknownStep| ApiError::bad_request(e.to_string()))?;
    let classified: Vec<_> = req.texts.iter().map(|t| lexicon.classify(step, t)).collect();
    Ok(Json(ClassifyResponse {
        lexicon_hash: lexicon.hash().to_string(),
        step,
        categories: classified.iter().map(|c| c.category).collect(),
        matched_keywords: classified.into_iter().map(|c| c.matched_keyword).collect(),
    }))
}

async fn graph_info(
    State(state): State<AppState>,
    headers: HeaderMap,
    UrlPath(id): UrlPath<String>,
) -> Result<Json<GraphInfo>, ApiError> {
    check_auth(&state, &headers)?;
    let graph = state.registry.graph(&id).ok_or_else(|| ApiError::not_found(format!("unknown graph id `{id}`")))?;
    Ok(Json(GraphInfo {
        id,
        version: graph.version().to_string(),
        hash: graph.hash().to_string(),
        steps: Step::ALL.iter().map(|s| StepInfo { step: *s, categories: graph.categories(*s).to_vec() }).collect(),
        paths: graph.expand_paths().iter().map(|p| p.0.to_vec()).collect(),
    }))
}

async fn health(State(state): State<AppState>) -> Json<Value> {
    Json(json!({
        "status": "ok",
        "version": pathwise_core::VERSION,
        "graphs": state.registry.graph_ids(),
        "lexicons": state.registry.lexicon_ids(),
    }))
}

/// Serves until ctrl-c.
pub async fn serve(addr: SocketAddr, state: AppState) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
