// SPDX-License-Identifier: MIT OR Apache-2.0

//! HTTP API over a loaded [`Session`].
//!
//! | route               | success                         |
//! |---------------------|---------------------------------|
//! | `GET /styles`       | style names, prompts and l*     |
//! | `POST /generate`    | one steered generation          |
//! | `GET /localization` | the stored layer report, as is  |
//!
//! Every route answers 503 until the session has loaded. Request bodies are
//! validated by hand so that schema errors (400) and non-finite numbers
//! (422) are told apart and always name the offending field.

use std::sync::{Arc, RwLock};
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::{json, Map, Value};
use tower_http::cors::CorsLayer;

use crate::pipeline::Run;
use crate::session::{GenerateParams, Session};

pub struct Loaded {
    pub session: Session,
    pub localization_json: String,
}

#[derive(Debug, Clone, Copy)]
pub struct Limits {
    pub max_len_cap: usize,
    pub budget: Duration,
}

impl Default for Limits {
    fn default() -> Self {
        Limits {
            max_len_cap: 512,
            budget: Duration::from_secs(30),
        }
    }
}

#[derive(Clone)]
pub struct AppState {
    loaded: Arc<RwLock<Option<Arc<Loaded>>>>,
    limits: Limits,
}

impl AppState {
    pub fn new(limits: Limits) -> Self {
        AppState {
            loaded: Arc::new(RwLock::new(None)),
            limits,
        }
    }

    /// A state sharing this one's session but with different limits.
    pub fn with_limits(&self, limits: Limits) -> Self {
        AppState {
            loaded: self.loaded.clone(),
            limits,
        }
    }

    pub fn set_loaded(&self, loaded: Loaded) {
        *self.loaded.write().expect("state lock") = Some(Arc::new(loaded));
    }

    fn get(&self) -> Result<Arc<Loaded>, ApiError> {
        self.loaded
            .read()
            .expect("state lock")
            .clone()
            .ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, None, "model not loaded yet"))
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    field: Option<String>,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, field: Option<&str>, message: impl Into<String>) -> Self {
        ApiError {
            status,
            field: field.map(str::to_string),
            message: message.into(),
        }
    }

    fn schema(field: &str, message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, Some(field), message)
    }

    fn non_finite(field: &str) -> Self {
        ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            Some(field),
            format!("{field} must be a finite number"),
        )
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({ "error": {
            "status": self.status.as_u16(),
            "field": self.field,
            "message": self.message,
        }});
        (self.status, Json(body)).into_response()
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/styles", get(styles))
        .route("/generate", post(generate))
        .route("/localization", get(localization))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

async fn styles(State(state): State<AppState>) -> Result<Json<Value>, ApiError> {
    let loaded = state.get()?;
    let s = &loaded.session;
    Ok(Json(json!({
        "selected_layer": s.layer,
        "styles": s.specs.iter().map(|spec| json!({
            "name": spec.label.name,
            "prompt": spec.prompt_text,
        })).collect::<Vec<_>>(),
    })))
}

async fn localization(State(state): State<AppState>) -> Result<Response, ApiError> {
    let loaded = state.get()?;
    Ok((
        [(header::CONTENT_TYPE, "application/json")],
        loaded.localization_json.clone(),
    )
        .into_response())
}

async fn generate(State(state): State<AppState>, body: Bytes) -> Result<Json<Value>, ApiError> {
    let loaded = state.get()?;
    let params = parse_request(&body, &loaded.session, &state.limits)?;
    let started = Instant::now();
    let work = {
        let loaded = loaded.clone();
        let params = params.clone();
        tokio::task::spawn_blocking(move || loaded.session.generate(&params))
    };
    let generated = match tokio::time::timeout(state.limits.budget, work).await {
        Err(_) => {
            return Err(ApiError::new(
                StatusCode::GATEWAY_TIMEOUT,
                None,
                format!("generation exceeded {:?}", state.limits.budget),
            ))
        }
        Ok(Err(join)) => {
            return Err(ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, None, join.to_string()))
        }
        Ok(Ok(Err(e))) => return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, None, e.to_string())),
        Ok(Ok(Ok(g))) => g,
    };
    let s = &loaded.session;
    Ok(Json(json!({
        "abc": generated.abc,
        "parse_valid": generated.parse_valid,
        "probabilities": generated.probabilities,
        "was_gated_count": generated.was_gated_count,
        "n_tokens": generated.n_tokens,
        "layer": s.layer,
        "elapsed_ms": started.elapsed().as_millis() as u64,
        "request": {
            "prompt_style": s.specs[params.prompt_style].label.name,
            "targets": params.terms.iter().map(|&(i, w)| json!({
                "style": s.specs[i].label.name,
                "weight": w,
            })).collect::<Vec<_>>(),
            "alpha": params.alpha,
            "steering": params.steering,
            "format_gate": params.format_gate,
            "norm_preserve": params.norm_preserve,
            "temperature": params.temperature,
            "seed": params.seed,
            "max_len": params.max_len,
        },
    })))
}

const FIELDS: [&str; 8] = [
    "prompt_style",
    "targets",
    "alpha",
    "max_len",
    "seed",
    "temperature",
    "format_gate",
    "norm_preserve",
];

/// Spellings of non-finite numbers that JSON cannot carry as numbers.
fn is_non_finite_marker(v: &Value) -> bool {
    match v {
        Value::Null => true,
        Value::String(s) => matches!(
            s.to_ascii_lowercase().as_str(),
            "nan" | "inf" | "+inf" | "-inf" | "infinity" | "+infinity" | "-infinity"
        ),
        _ => false,
    }
}

fn finite(obj: &Map<String, Value>, key: &str, field: &str) -> Result<Option<f64>, ApiError> {
    match obj.get(key) {
        None => Ok(None),
        Some(v) if is_non_finite_marker(v) => Err(ApiError::non_finite(field)),
        Some(Value::Number(n)) => match n.as_f64() {
            Some(x) if x.is_finite() => Ok(Some(x)),
            _ => Err(ApiError::non_finite(field)),
        },
        Some(_) => Err(ApiError::schema(field, format!("{field} must be a number"))),
    }
}

fn boolean(obj: &Map<String, Value>, key: &str) -> Result<Option<bool>, ApiError> {
    match obj.get(key) {
        None => Ok(None),
        Some(Value::Bool(b)) => Ok(Some(*b)),
        Some(_) => Err(ApiError::schema(key, format!("{key} must be a boolean"))),
    }
}

fn unsigned(obj: &Map<String, Value>, key: &str) -> Result<Option<u64>, ApiError> {
    match obj.get(key) {
        None => Ok(None),
        Some(v) => v
            .as_u64()
            .map(Some)
            .ok_or_else(|| ApiError::schema(key, format!("{key} must be a non-negative integer"))),
    }
}

fn style(session: &Session, v: Option<&Value>, field: &str) -> Result<usize, ApiError> {
    let name = v
        .and_then(Value::as_str)
        .ok_or_else(|| ApiError::schema(field, format!("{field} must be a style name")))?;
    session
        .style_index(name)
        .ok_or_else(|| ApiError::schema(field, format!("unknown style {name:?}")))
}

/// Validates a `/generate` body. Steering is on when `targets` is non-empty.
pub fn parse_request(body: &[u8], session: &Session, limits: &Limits) -> Result<GenerateParams, ApiError> {
    let value: Value = serde_json::from_slice(body).map_err(|e| {
        if e.to_string().contains("number out of range") {
            ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, None, e.to_string())
        } else {
            ApiError::schema("body", format!("invalid JSON: {e}"))
        }
    })?;
    let obj = value
        .as_object()
        .ok_or_else(|| ApiError::schema("body", "body must be a JSON object"))?;
    if let Some(k) = obj.keys().find(|k| !FIELDS.contains(&k.as_str())) {
        return Err(ApiError::schema(k, format!("unknown field {k:?}")));
    }
    let prompt_style = style(session, obj.get("prompt_style"), "prompt_style")?;

    let mut terms = Vec::new();
    match obj.get("targets") {
        None => {}
        Some(Value::Array(items)) => {
            for (i, item) in items.iter().enumerate() {
                let t = item.as_object().ok_or_else(|| {
                    ApiError::schema(&format!("targets[{i}]"), "target must be an object")
                })?;
                if let Some(k) = t.keys().find(|k| *k != "style" && *k != "weight") {
                    return Err(ApiError::schema(&format!("targets[{i}].{k}"), "unknown field"));
                }
                let index = style(session, t.get("style"), &format!("targets[{i}].style"))?;
                let weight = finite(t, "weight", &format!("targets[{i}].weight"))?.unwrap_or(1.0);
                terms.push((index, weight));
            }
        }
        Some(_) => return Err(ApiError::schema("targets", "targets must be an array")),
    }

    let alpha = finite(obj, "alpha", "alpha")?.unwrap_or(0.0);
    let max_len = unsigned(obj, "max_len")?.unwrap_or(250);
    if max_len > limits.max_len_cap as u64 {
        return Err(ApiError::schema(
            "max_len",
            format!("max_len {max_len} exceeds the server limit {}", limits.max_len_cap),
        ));
    }
    let temperature = finite(obj, "temperature", "temperature")?.unwrap_or(0.8);
    if temperature < 0.0 {
        return Err(ApiError::schema("temperature", "temperature must be non-negative"));
    }
    Ok(GenerateParams {
        prompt_style,
        steering: !terms.is_empty(),
        terms,
        alpha,
        format_gate: boolean(obj, "format_gate")?.unwrap_or(true),
        norm_preserve: boolean(obj, "norm_preserve")?.unwrap_or(true),
        temperature,
        seed: unsigned(obj, "seed")?.unwrap_or(0),
        max_len: max_len as usize,
    })
}

/// Loads a session from the run directory, running `localize` and
/// `build-vectors` first when their outputs are missing.
pub fn load(run: &Run) -> Result<Loaded, crate::error::CliError> {
    let localization_json = match run.localization_json() {
        Ok(text) => text,
        Err(_) => crate::pipeline::localize(run)?,
    };
    let session = match run.session(None) {
        Ok(s) => s,
        Err(_) => {
            crate::pipeline::build_vectors(run, None)?;
            run.session(None)?
        }
    };
    Ok(Loaded {
        session,
        localization_json,
    })
}

/// Binds `addr`, then loads the run in the background; requests made before
/// the load finishes get 503.
pub async fn serve(run: Run, addr: &str, limits: Limits) -> Result<(), crate::error::CliError> {
    let state = AppState::new(limits);
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    let loader = state.clone();
    tokio::task::spawn_blocking(move || match load(&run) {
        Ok(loaded) => {
            eprintln!("model loaded (layer {})", loaded.session.layer);
            loader.set_loaded(loaded);
        }
        Err(e) => eprintln!("{}", e.to_json()),
    });
    axum::serve(listener, router(state)).await?;
    Ok(())
}
