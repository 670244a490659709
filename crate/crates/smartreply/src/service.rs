//! JSON-over-HTTP suggestion service. Engine state is read-only after
//! startup; the click log is the only thing that changes.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Serialize;
use serde_json::{json, Map, Value};
use smartreply_core::corpus::tokenize;
use smartreply_core::inference::{PipelineConfig, Ranker, SuggestionEngine, SuggestionResult};

use crate::bench::StdClock;

/// Rankers shown side by side by `/compare`.
pub const COMPARE_RANKERS: [Ranker; 3] = [Ranker::Matching, Ranker::Mmr, Ranker::Mcvae];
pub const MAX_SAMPLES: usize = 5000;

pub struct AppState {
    pub engine: SuggestionEngine,
    pub defaults: PipelineConfig,
    pub model_hash: String,
    click_log: Mutex<File>,
    click_path: PathBuf,
}

impl AppState {
    pub fn new(
        engine: SuggestionEngine,
        defaults: PipelineConfig,
        model_hash: String,
        click_log: &Path,
    ) -> std::io::Result<Self> {
        if let Some(dir) = click_log.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(click_log)?;
        Ok(Self {
            engine,
            defaults,
            model_hash,
            click_log: Mutex::new(file),
            click_path: click_log.to_path_buf(),
        })
    }

    pub fn click_path(&self) -> &Path {
        &self.click_path
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
    field: Option<String>,
}

impl ApiError {
    fn bad(field: &str, message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            message: message.into(),
            field: Some(field.into()),
        }
    }

    fn internal(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            message: message.into(),
            field: None,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "error": self.message });
        if let Some(f) = self.field {
            body["field"] = Value::String(f);
        }
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn parse_body(bytes: &Bytes) -> ApiResult<Map<String, Value>> {
    match serde_json::from_slice::<Value>(bytes) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(_) => Err(ApiError::bad("body", "request body must be a JSON object")),
        Err(e) => Err(ApiError::bad("body", format!("malformed JSON: {e}"))),
    }
}

fn string_field(body: &Map<String, Value>, field: &str) -> ApiResult<String> {
    match body.get(field) {
        Some(Value::String(s)) => Ok(s.clone()),
        Some(_) => Err(ApiError::bad(field, format!("{field} must be a string"))),
        None => Err(ApiError::bad(field, format!("missing field {field}"))),
    }
}

fn message_field(state: &AppState, body: &Map<String, Value>) -> ApiResult<String> {
    let message = string_field(body, "message")?;
    let n = tokenize(&message).len();
    if n == 0 {
        return Err(ApiError::bad("message", "message has no tokens"));
    }
    if n > state.engine.max_len {
        return Err(ApiError {
            status: StatusCode::PAYLOAD_TOO_LARGE,
            message: format!("message has {n} tokens; the limit is {}", state.engine.max_len),
            field: Some("message".into()),
        });
    }
    Ok(message)
}

fn number(v: &Value, field: &str) -> ApiResult<f64> {
    v.as_f64()
        .filter(|x| x.is_finite())
        .ok_or_else(|| ApiError::bad(field, format!("{field} must be a finite number")))
}

fn integer(v: &Value, field: &str, lo: u64, hi: u64) -> ApiResult<u64> {
    match v.as_u64() {
        Some(x) if (lo..=hi).contains(&x) => Ok(x),
        _ => Err(ApiError::bad(field, format!("{field} must be an integer in [{lo}, {hi}]"))),
    }
}

/// Overlays request params on the defaults, checking each documented range.
fn pipeline(state: &AppState, body: &Map<String, Value>) -> ApiResult<PipelineConfig> {
    let mut cfg = state.defaults.clone();
    let Some(params) = body.get("params") else {
        return Ok(cfg);
    };
    let params = match params {
        Value::Object(m) => m,
        Value::Null => return Ok(cfg),
        _ => return Err(ApiError::bad("params", "params must be an object")),
    };
    let r = state.engine.artifact.len() as u64;
    for (key, v) in params {
        let field = format!("params.{key}");
        match key.as_str() {
            "alpha" => {
                let a = number(v, &field)?;
                if a < 0.0 {
                    return Err(ApiError::bad(&field, "alpha must be ≥ 0"));
                }
                cfg.alpha = a as f32;
            }
            "beta" => {
                let b = number(v, &field)?;
                if !(0.0..=1.0).contains(&b) {
                    return Err(ApiError::bad(&field, "beta must be in [0, 1]"));
                }
                cfg.beta = b as f32;
            }
            "k" => cfg.k = integer(v, &field, 3, r.max(3))? as usize,
            "s" => cfg.samples = integer(v, &field, 1, MAX_SAMPLES as u64)? as usize,
            "seed" => cfg.seed = integer(v, &field, 0, u64::MAX)?,
            "use_mmr_preselect" => {
                cfg.use_mmr_preselect = v
                    .as_bool()
                    .ok_or_else(|| ApiError::bad(&field, "use_mmr_preselect must be a boolean"))?
            }
            _ => return Err(ApiError::bad(&field, format!("unknown parameter {key}"))),
        }
    }
    Ok(cfg)
}

fn ranker_field(body: &Map<String, Value>, default: Ranker) -> ApiResult<Ranker> {
    match body.get("ranker") {
        None | Some(Value::Null) => Ok(default),
        Some(Value::String(s)) => s.parse().map_err(|_| {
            let names: Vec<&str> = Ranker::ALL.iter().map(|r| r.name()).collect();
            ApiError::bad("ranker", format!("unknown ranker {s:?}; expected one of {}", names.join(", ")))
        }),
        Some(_) => Err(ApiError::bad("ranker", "ranker must be a string")),
    }
}

async fn run<T: Send + 'static>(
    state: &Arc<AppState>,
    f: impl FnOnce(&AppState) -> ApiResult<T> + Send + 'static,
) -> ApiResult<T> {
    let st = Arc::clone(state);
    tokio::task::spawn_blocking(move || f(&st))
        .await
        .map_err(|e| ApiError::internal(format!("worker failed: {e}")))?
}

fn suggest_one(state: &AppState, message: &str, ranker: Ranker, cfg: &PipelineConfig) -> ApiResult<SuggestionResult> {
    if ranker.needs_cvae() && state.engine.cvae.is_none() {
        return Err(ApiError::bad("ranker", format!("{ranker} needs a CVAE, and none is loaded")));
    }
    state
        .engine
        .suggest(message, ranker, cfg, &StdClock::new())
        .map_err(|e| ApiError::bad("params", e.to_string()))
}

async fn suggest(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Json<SuggestionResult>> {
    let body = parse_body(&body)?;
    let message = message_field(&state, &body)?;
    let ranker = ranker_field(&body, Ranker::Matching)?;
    let cfg = pipeline(&state, &body)?;
    run(&state, move |st| suggest_one(st, &message, ranker, &cfg)).await.map(Json)
}

#[derive(Serialize)]
struct CompareResponse {
    message: String,
    results: Vec<SuggestionResult>,
}

async fn compare(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Json<Value>> {
    let body = parse_body(&body)?;
    let message = message_field(&state, &body)?;
    let cfg = pipeline(&state, &body)?;
    let out = run(&state, move |st| {
        let results = COMPARE_RANKERS
            .iter()
            .filter(|r| !r.needs_cvae() || st.engine.cvae.is_some())
            .map(|&r| suggest_one(st, &message, r, &cfg))
            .collect::<ApiResult<Vec<_>>>()?;
        Ok(CompareResponse { message, results })
    })
    .await?;
    Ok(Json(serde_json::to_value(out).expect("serializable")))
}

async fn click(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Json<Value>> {
    let body = parse_body(&body)?;
    let message = string_field(&body, "message")?;
    let chosen = string_field(&body, "chosen_text")?;
    let ranker = string_field(&body, "ranker")?;
    ranker_field(&body, Ranker::Matching)?;
    let ts = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64);
    let mut line = serde_json::to_vec(&json!({
        "ts_ms": ts,
        "message": message,
        "chosen_text": chosen,
        "ranker": ranker,
    }))
    .expect("serializable");
    line.push(b'\n');
    {
        // One write of the whole line under the lock keeps lines whole.
        let mut f = state.click_log.lock().map_err(|_| ApiError::internal("click log lock poisoned"))?;
        f.write_all(&line)
            .and_then(|_| f.flush())
            .map_err(|e| ApiError::internal(format!("click log: {e}")))?;
    }
    Ok(Json(json!({ "ack": true })))
}

async fn health(State(state): State<Arc<AppState>>) -> Json<Value> {
    Json(json!({ "status": "ok", "model_hash": state.model_hash }))
}

async fn config(State(state): State<Arc<AppState>>) -> Json<PipelineConfig> {
    Json(state.defaults.clone())
}

pub fn router(state: Arc<AppState>, max_body_bytes: usize) -> Router {
    Router::new()
        .route("/suggest", post(suggest))
        .route("/compare", post(compare))
        .route("/click", post(click))
        .route("/health", get(health))
        .route("/config", get(config))
        .layer(DefaultBodyLimit::max(max_body_bytes))
        .with_state(state)
}

pub async fn serve(state: Arc<AppState>, addr: &str, max_body_bytes: usize) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state, max_body_bytes)).await
}
