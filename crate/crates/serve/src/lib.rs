//! HTTP inference service over loaded caption and retrieval checkpoints.
//!
//! `GET /v1/health`, `GET /v1/model`, `POST /v1/caption`, `POST /v1/retrieve`.
//! Images travel as the raw request body or as the `image` part of a
//! multipart form; the retrieval query comes from a `query` form part or the
//! `query` URL parameter. Response bodies depend only on the checkpoint and
//! the request; the inference time is reported in the `x-latency-ms` header.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, RwLock};
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, FromRequest, Multipart, Query, Request, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use got_core::checkpoint::{load_for_task, Checkpoint, FORMAT_VERSION};
use got_core::datasets::{tokenize, Image};
use got_core::infer_eval::{detect_and_caption, retrieve};
use got_core::model::{Model, Task};
use serde::{Deserialize, Serialize};
use serde_json::json;

pub const MAX_BODY_BYTES: usize = 32 * 1024 * 1024;

/// A model as served, with the manifest facts reported by `/v1/model`.
pub struct Loaded {
    pub model: Model,
    pub digest: String,
    pub iteration: usize,
    pub source: Option<PathBuf>,
}

impl Loaded {
    pub fn from_checkpoint(ckpt: Checkpoint, source: Option<PathBuf>) -> Self {
        Self { digest: ckpt.manifest.digest, iteration: ckpt.manifest.iteration, model: ckpt.model, source }
    }

    /// An in-memory model, digested the same way checkpoints are.
    pub fn from_model(model: Model) -> Self {
        let digest = format!("{:016x}", model.params.digest());
        Self { model, digest, iteration: 0, source: None }
    }

    fn info(&self) -> serde_json::Value {
        json!({
            "task": self.model.config.task,
            "mode": self.model.config.mode,
            "digest": self.digest,
            "iteration": self.iteration,
            "vocab_size": self.model.vocab.len(),
            "superclasses": self.model.superclasses,
            "source": self.source,
        })
    }
}

#[derive(Default)]
struct Models {
    caption: Option<Arc<Loaded>>,
    retrieval: Option<Arc<Loaded>>,
}

#[derive(Debug, Default, Serialize, Deserialize, Clone, Copy, PartialEq, Eq)]
pub struct Counters {
    pub requests: u64,
    pub caption: u64,
    pub retrieve: u64,
    pub errors: u64,
}

#[derive(Default)]
struct AtomicCounters {
    requests: AtomicU64,
    caption: AtomicU64,
    retrieve: AtomicU64,
    errors: AtomicU64,
}

/// Shared service state. Models are immutable once installed; installing
/// takes the write lock, so no request runs during a swap.
#[derive(Default)]
pub struct ServiceState {
    models: RwLock<Models>,
    ready: AtomicBool,
    counters: AtomicCounters,
}

impl ServiceState {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    pub fn install(&self, loaded: Loaded) {
        self.ready.store(false, Ordering::SeqCst);
        let mut m = self.models.write().expect("model lock");
        match loaded.model.config.task {
            Task::Caption => m.caption = Some(Arc::new(loaded)),
            Task::Retrieval => m.retrieval = Some(Arc::new(loaded)),
        }
        self.ready.store(true, Ordering::SeqCst);
    }

    pub fn load_checkpoint(&self, task: Task, path: &Path) -> got_core::Result<()> {
        let ckpt = load_for_task(path, task)?;
        self.install(Loaded::from_checkpoint(ckpt, Some(path.to_path_buf())));
        Ok(())
    }

    pub fn is_ready(&self) -> bool {
        self.ready.load(Ordering::SeqCst)
    }

    pub fn counters(&self) -> Counters {
        let c = &self.counters;
        Counters {
            requests: c.requests.load(Ordering::SeqCst),
            caption: c.caption.load(Ordering::SeqCst),
            retrieve: c.retrieve.load(Ordering::SeqCst),
            errors: c.errors.load(Ordering::SeqCst),
        }
    }

    fn get(&self, task: Task) -> Option<Arc<Loaded>> {
        let m = self.models.read().expect("model lock");
        match task {
            Task::Caption => m.caption.clone(),
            Task::Retrieval => m.retrieval.clone(),
        }
    }

    /// Digests of the loaded parameters, recomputed from the weights.
    pub fn param_digests(&self) -> Vec<(Task, u64)> {
        [Task::Caption, Task::Retrieval].into_iter().filter_map(|t| self.get(t).map(|l| (t, l.model.params.digest()))).collect()
    }
}

/// JSON error body `{error, code}`.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self { status, message: message.into() }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message, "code": self.status.as_u16() }))).into_response()
    }
}

fn internal(err: impl std::fmt::Display) -> ApiError {
    static NEXT: AtomicU64 = AtomicU64::new(1);
    let id = NEXT.fetch_add(1, Ordering::SeqCst);
    tracing::error!(id, %err, "request failed");
    ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, format!("internal error, id {id}"))
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ApiDetection {
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub superclass: String,
    pub score: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub caption: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub retrieval_score: Option<f64>,
}

pub fn router(state: Arc<ServiceState>) -> Router {
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/model", get(model_info))
        .route("/v1/caption", post(caption))
        .route("/v1/retrieve", post(retrieve_handler))
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
        .with_state(state)
}

async fn health(State(s): State<Arc<ServiceState>>) -> Json<serde_json::Value> {
    let tasks: Vec<Task> = [Task::Caption, Task::Retrieval].into_iter().filter(|&t| s.get(t).is_some()).collect();
    let vocab_size = tasks.first().and_then(|&t| s.get(t)).map(|l| l.model.vocab.len());
    Json(json!({ "ready": s.is_ready(), "tasks": tasks, "vocab_size": vocab_size, "counters": s.counters() }))
}

async fn model_info(State(s): State<Arc<ServiceState>>) -> Json<serde_json::Value> {
    Json(json!({
        "format_version": FORMAT_VERSION,
        "caption": s.get(Task::Caption).map(|l| l.info()),
        "retrieval": s.get(Task::Retrieval).map(|l| l.info()),
    }))
}

struct Upload {
    image: Bytes,
    query: Option<String>,
}

#[derive(Deserialize)]
struct QueryParam {
    query: Option<String>,
}

async fn read_upload(req: Request) -> Result<Upload, ApiError> {
    let is_multipart = req
        .headers()
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.starts_with("multipart/form-data"));
    let url_query = Query::<QueryParam>::try_from_uri(req.uri()).ok().and_then(|q| q.0.query);
    if !is_multipart {
        let image = Bytes::from_request(req, &()).await.map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.body_text()))?;
        return Ok(Upload { image, query: url_query });
    }
    let mut form = Multipart::from_request(req, &()).await.map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.body_text()))?;
    let mut up = Upload { image: Bytes::new(), query: url_query };
    while let Some(field) = form.next_field().await.map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.body_text()))? {
        let name = field.name().unwrap_or("").to_string();
        let data = field.bytes().await.map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.body_text()))?;
        match name.as_str() {
            "image" => up.image = data,
            "query" => up.query = Some(String::from_utf8_lossy(&data).into_owned()),
            _ => {}
        }
    }
    Ok(up)
}

fn decode_image(bytes: &[u8]) -> Result<Image, ApiError> {
    if bytes.is_empty() {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "empty image body"));
    }
    Image::decode(bytes).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("undecodable image: {e}")))
}

fn require(s: &ServiceState, task: Task) -> Result<Arc<Loaded>, ApiError> {
    s.get(task).ok_or_else(|| ApiError::new(StatusCode::CONFLICT, format!("no {task} model loaded")))
}

fn with_latency(body: serde_json::Value, started: Instant) -> Response {
    let mut resp = Json(body).into_response();
    let ms = format!("{:.3}", started.elapsed().as_secs_f64() * 1000.0);
    resp.headers_mut().insert("x-latency-ms", HeaderValue::from_str(&ms).expect("ascii"));
    resp
}

fn count_error<T>(s: &ServiceState, r: Result<T, ApiError>) -> Result<T, ApiError> {
    if r.is_err() {
        s.counters.errors.fetch_add(1, Ordering::SeqCst);
    }
    r
}

fn run_inference<F, T>(f: F) -> impl std::future::Future<Output = Result<T, ApiError>>
where
    F: FnOnce() -> got_core::Result<T> + Send + 'static,
    T: Send + 'static,
{
    async move {
        match tokio::task::spawn_blocking(f).await {
            Ok(Ok(v)) => Ok(v),
            Ok(Err(e)) if e.is_validation() => Err(ApiError::new(StatusCode::BAD_REQUEST, e.to_string())),
            Ok(Err(e)) => Err(internal(e)),
            Err(e) => Err(internal(e)),
        }
    }
}

fn model_ref(l: &Loaded) -> serde_json::Value {
    json!({ "task": l.model.config.task, "digest": l.digest, "format_version": FORMAT_VERSION })
}

async fn caption(State(s): State<Arc<ServiceState>>, req: Request) -> Result<Response, ApiError> {
    s.counters.requests.fetch_add(1, Ordering::SeqCst);
    s.counters.caption.fetch_add(1, Ordering::SeqCst);
    let started = Instant::now();
    let r = async {
        let up = read_upload(req).await?;
        let loaded = require(&s, Task::Caption)?;
        let image = decode_image(&up.image)?;
        let l = loaded.clone();
        let result = run_inference(move || detect_and_caption(&l.model, &image)).await?;
        let dets: Vec<ApiDetection> = result
            .objects
            .iter()
            .map(|o| ApiDetection {
                bbox: o.bbox.to_array(),
                superclass: superclass_name(&loaded.model, o.superclass_id),
                score: o.score,
                caption: Some(o.caption.join(" ")),
                retrieval_score: None,
            })
            .collect();
        Ok(json!({ "model": model_ref(&loaded), "fallback": result.fallback, "detections": dets }))
    }
    .await;
    count_error(&s, r).map(|b| with_latency(b, started))
}

async fn retrieve_handler(State(s): State<Arc<ServiceState>>, req: Request) -> Result<Response, ApiError> {
    s.counters.requests.fetch_add(1, Ordering::SeqCst);
    s.counters.retrieve.fetch_add(1, Ordering::SeqCst);
    let started = Instant::now();
    let r = async {
        let up = read_upload(req).await?;
        let words = tokenize(up.query.as_deref().unwrap_or(""));
        if words.is_empty() {
            return Err(ApiError::new(StatusCode::BAD_REQUEST, "missing query"));
        }
        let loaded = require(&s, Task::Retrieval)?;
        let image = decode_image(&up.image)?;
        let l = loaded.clone();
        let q = words.clone();
        let result = run_inference(move || retrieve(&l.model, &image, &q)).await?;
        let mut order: Vec<usize> = (0..result.candidates.len()).filter(|&i| i != result.chosen).collect();
        order.sort_by(|&a, &b| result.candidates[b].raw.total_cmp(&result.candidates[a].raw).then(a.cmp(&b)));
        order.insert(0, result.chosen);
        let dets: Vec<ApiDetection> = order
            .iter()
            .map(|&i| {
                let c = &result.candidates[i];
                ApiDetection {
                    bbox: c.bbox.to_array(),
                    superclass: superclass_name(&loaded.model, c.superclass_id),
                    score: c.detection_score,
                    caption: None,
                    retrieval_score: Some(c.score),
                }
            })
            .collect();
        Ok(json!({
            "model": model_ref(&loaded),
            "query": words.join(" "),
            "all_unknown": result.all_unknown,
            "detections": dets,
        }))
    }
    .await;
    count_error(&s, r).map(|b| with_latency(b, started))
}

fn superclass_name(m: &Model, id: usize) -> String {
    m.superclasses.get(id).cloned().unwrap_or_else(|| id.to_string())
}

/// Bind address and checkpoints. Environment variables override the values
/// given on the command line.
#[derive(Debug, Clone, PartialEq)]
pub struct ServeConfig {
    pub bind: String,
    pub port: u16,
    pub caption_checkpoint: Option<PathBuf>,
    pub retrieval_checkpoint: Option<PathBuf>,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self { bind: "127.0.0.1".into(), port: 8080, caption_checkpoint: None, retrieval_checkpoint: None }
    }
}

impl ServeConfig {
    pub fn with_env(mut self, get: impl Fn(&str) -> Option<String>) -> got_core::Result<Self> {
        if let Some(p) = get("GOT_PORT") {
            self.port = p.parse().map_err(|_| got_core::Error::Config(format!("bad GOT_PORT `{p}`")))?;
        }
        if let Some(p) = get("GOT_CHECKPOINT_CAPTION") {
            self.caption_checkpoint = Some(p.into());
        }
        if let Some(p) = get("GOT_CHECKPOINT_RETRIEVAL") {
            self.retrieval_checkpoint = Some(p.into());
        }
        Ok(self)
    }

    pub fn from_process_env(self) -> got_core::Result<Self> {
        self.with_env(|k| std::env::var(k).ok())
    }

    /// Loads the configured checkpoints into a fresh state.
    pub fn load_state(&self) -> got_core::Result<Arc<ServiceState>> {
        let state = ServiceState::new();
        if let Some(p) = &self.caption_checkpoint {
            state.load_checkpoint(Task::Caption, p)?;
        }
        if let Some(p) = &self.retrieval_checkpoint {
            state.load_checkpoint(Task::Retrieval, p)?;
        }
        Ok(state)
    }
}

/// Serves until ctrl-c.
pub async fn serve(cfg: &ServeConfig, state: Arc<ServiceState>) -> std::io::Result<()> {
    let addr: SocketAddr = format!("{}:{}", cfg.bind, cfg.port)
        .parse()
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidInput, format!("{e}")))?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(%addr, ready = state.is_ready(), "listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
