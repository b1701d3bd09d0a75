//! JSON-over-HTTP front end for the medrag engine. Every route lives under
//! `/v1/`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use medrag_core::cache::{CacheConfig, CacheStrategy};
use medrag_core::corpus::{ChunkConfig, IngestError, IngestReport};
use medrag_core::engine::{CacheOverride, Engine, EngineError};
use medrag_core::eval::{self, decimal_from_f64, report_csv, EvalRecord, EvalSummary, Rounding};
use medrag_core::index::RetrievedContext;
use medrag_core::llm::GenerationParams;
use medrag_core::session::{Intent, Session};
use medrag_core::ServiceConfig;
use rust_decimal::Decimal;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

pub struct AppState {
    engine: Arc<Engine>,
    chunking: ChunkConfig,
    index_path: Option<PathBuf>,
    sessions: Mutex<HashMap<String, Arc<Mutex<Session>>>>,
    grades: Mutex<BTreeMap<String, Decimal>>,
    last_report: Mutex<Option<String>>,
}

impl AppState {
    pub fn new(engine: Engine, chunking: ChunkConfig, index_path: Option<PathBuf>) -> Self {
        Self {
            engine: Arc::new(engine),
            chunking,
            index_path,
            sessions: Mutex::new(HashMap::new()),
            grades: Mutex::new(BTreeMap::new()),
            last_report: Mutex::new(None),
        }
    }

    pub fn from_config(cfg: &ServiceConfig) -> Result<Self, EngineError> {
        let engine = Engine::from_config(cfg)?;
        Ok(Self::new(engine, cfg.chunking, cfg.index_path.as_ref().map(PathBuf::from)))
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }

    fn session(&self, id: &str) -> Option<Arc<Mutex<Session>>> {
        self.sessions.lock().unwrap().get(id).cloned()
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/ingest", post(ingest))
        .route("/v1/chat", post(chat))
        .route("/v1/sessions/{id}", get(session_transcript))
        .route("/v1/grade", post(grade))
        .route("/v1/eval", post(evaluate))
        .route("/v1/eval/report.csv", get(eval_report))
        .with_state(state)
}

/// Binds `cfg.bind_address` and serves until ctrl-c.
pub async fn serve(cfg: &ServiceConfig) -> Result<(), Box<dyn std::error::Error + Send + Sync>> {
    let state = AppState::from_config(cfg)?;
    if !cfg.corpus_paths.is_empty() {
        let report = state.engine.ingest(&cfg.corpus_paths, &cfg.chunking)?;
        tracing::info!(documents = report.documents, chunks = report.chunks, "corpus loaded");
    }
    let listener = tokio::net::TcpListener::bind(&cfg.bind_address).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(Arc::new(state)))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: serde_json::Value,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            body: json!({ "error": message.into() }),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Err(ApiError::bad_request("request body is empty"));
    }
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("invalid request body: {e}")))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("worker failed: {e}")))
}

async fn health(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(json!({
        "status": "ok",
        "version": medrag_core::VERSION,
        "chunks": state.engine.chunk_count(),
    }))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct IngestRequest {
    #[serde(default)]
    paths: Vec<String>,
}

async fn ingest(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Json<IngestReport>> {
    let req: IngestRequest = parse_body(&body)?;
    if req.paths.is_empty() {
        return Err(ApiError::bad_request("paths must not be empty"));
    }
    let st = state.clone();
    let result = blocking(move || {
        let report = st.engine.ingest(&req.paths, &st.chunking)?;
        if let Some(dir) = &st.index_path {
            st.engine.persist(dir)?;
        }
        Ok::<_, EngineError>(report)
    })
    .await?;
    match result {
        Ok(report) => Ok(Json(report)),
        Err(EngineError::Ingest(IngestError::AllFailed(failures))) => Err(ApiError {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            body: json!({ "error": "no document could be ingested", "failures": failures }),
        }),
        Err(e) => Err(ApiError::internal(e.to_string())),
    }
}

/// Per-request overrides; unset fields fall back to the configured defaults.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChatParams {
    pub temperature: Option<f64>,
    pub top_p: Option<f64>,
    pub max_tokens: Option<u32>,
    pub max_sentences: Option<usize>,
    pub seed: Option<u64>,
    /// `off`, `exact` or `distance`.
    pub cache: Option<String>,
    pub max_distance: Option<f64>,
}

impl ChatParams {
    fn resolve(&self, engine: &Engine) -> ApiResult<(GenerationParams, CacheOverride)> {
        let mut params = engine.settings().params.clone();
        if let Some(t) = self.temperature {
            params.temperature = t;
        }
        if let Some(p) = self.top_p {
            params.top_p = p;
        }
        if let Some(m) = self.max_tokens {
            params.max_tokens = m;
        }
        if self.max_sentences.is_some() {
            params.max_sentences = self.max_sentences;
        }
        if let Some(seed) = self.seed {
            params.seed = seed;
        }
        params.validate().map_err(|e| ApiError::bad_request(e.to_string()))?;

        let base = engine.cache_default().unwrap_or_default();
        let with_distance = |strategy| {
            let cfg = CacheConfig {
                strategy,
                max_distance: self.max_distance.unwrap_or(base.max_distance),
                ..base
            };
            cfg.validate().map_err(|e| ApiError::bad_request(e.to_string()))?;
            Ok::<_, ApiError>(CacheOverride::Use(cfg))
        };
        let cache = match self.cache.as_deref() {
            None if self.max_distance.is_none() => CacheOverride::Default,
            None => with_distance(base.strategy)?,
            Some("off") => CacheOverride::Off,
            Some("exact") => with_distance(CacheStrategy::Exact)?,
            Some("distance") => with_distance(CacheStrategy::Distance)?,
            Some(other) => return Err(ApiError::bad_request(format!("unknown cache strategy {other:?}"))),
        };
        Ok((params, cache))
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ChatRequest {
    session_id: Option<String>,
    query: String,
    #[serde(default)]
    params: ChatParams,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ChatResponse {
    pub session_id: String,
    pub answer: String,
    pub intent: Intent,
    pub sources: Vec<RetrievedContext>,
    pub cached: bool,
}

async fn chat(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Response> {
    let req: ChatRequest = parse_body(&body)?;
    if req.query.trim().is_empty() {
        return Err(ApiError::bad_request("query must not be empty"));
    }
    let (params, cache) = req.params.resolve(&state.engine)?;
    let session = match &req.session_id {
        Some(id) => state
            .session(id)
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown session {id}")))?,
        None => {
            let session = Session::new();
            let id = session.session_id.clone();
            let handle = Arc::new(Mutex::new(session));
            state.sessions.lock().unwrap().insert(id, handle.clone());
            handle
        }
    };
    let engine = state.engine.clone();
    let (session_id, answer) = blocking(move || {
        let mut session = session.lock().unwrap_or_else(|e| e.into_inner());
        let answer = engine.next_turn_with(&mut session, &req.query, &params, cache);
        (session.session_id.clone(), answer)
    })
    .await?;

    if let Some(failure) = answer.error {
        let body = json!({
            "error": failure.message,
            "retriable": failure.retriable,
            "session_id": session_id,
            "answer": answer.text,
        });
        return Ok((StatusCode::BAD_GATEWAY, Json(body)).into_response());
    }
    Ok(Json(ChatResponse {
        session_id,
        answer: answer.text,
        intent: answer.intent,
        sources: answer.sources,
        cached: answer.cached,
    })
    .into_response())
}

async fn session_transcript(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<Session>> {
    let handle = state
        .session(&id)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown session {id}")))?;
    let session = handle.lock().unwrap_or_else(|e| e.into_inner()).clone();
    Ok(Json(session))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GradeRequest {
    question_id: String,
    #[serde(rename = "G")]
    g: f64,
}

async fn grade(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Json<serde_json::Value>> {
    let req: GradeRequest = parse_body(&body)?;
    if req.question_id.is_empty() {
        return Err(ApiError::bad_request("question_id must not be empty"));
    }
    if !(0.0..=1.0).contains(&req.g) {
        return Err(ApiError::bad_request(format!(
            "score {} for {} is outside [0, 1]",
            req.g, req.question_id
        )));
    }
    let g = decimal_from_f64(req.g);
    state.grades.lock().unwrap().insert(req.question_id.clone(), g);
    Ok(Json(json!({ "question_id": req.question_id, "G": req.g })))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EvalRequest {
    items_csv: String,
    grades_csv: Option<String>,
    n_values: Option<BTreeSet<usize>>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EvalResponse {
    pub records: Vec<EvalRecord>,
    pub summary: Option<EvalSummary>,
    pub warnings: Vec<String>,
    pub report_csv: String,
}

async fn evaluate(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Json<EvalResponse>> {
    let req: EvalRequest = parse_body(&body)?;
    let bad = |e: eval::EvalError| ApiError::bad_request(e.to_string());
    let inputs = eval::parse_items_csv(&req.items_csv).map_err(bad)?;
    // grades posted through /v1/grade, overridden by an uploaded grades file
    let mut grades = state.grades.lock().unwrap().clone();
    if let Some(text) = &req.grades_csv {
        grades.extend(eval::parse_grades_csv(text).map_err(bad)?);
    }
    let n_values = req.n_values.unwrap_or_else(eval::default_n_values);
    let run = blocking(move || eval::run_eval(&inputs, &grades, &n_values, &Rounding::default()))
        .await?
        .map_err(bad)?;
    let csv = report_csv(&run);
    *state.last_report.lock().unwrap() = Some(csv.clone());
    Ok(Json(EvalResponse {
        records: run.records,
        summary: run.summary,
        warnings: run.warnings,
        report_csv: csv,
    }))
}

async fn eval_report(State(state): State<Arc<AppState>>) -> ApiResult<Response> {
    let csv = state
        .last_report
        .lock()
        .unwrap()
        .clone()
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "no evaluation has run yet"))?;
    Ok((
        [
            (header::CONTENT_TYPE, "text/csv; charset=utf-8"),
            (header::CONTENT_DISPOSITION, "attachment; filename=\"report.csv\""),
        ],
        csv,
    )
        .into_response())
}
