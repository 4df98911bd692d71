//! Read-only HTTP inference service.
//!
//! The model and concepts are loaded once and shared immutably; every
//! handler is a pure function of its request.

use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use staged_alae::alae::{sample_normal, Alae};
use staged_alae::concepts::{edit_latent, interpolate, ConceptVector, InterpolationMode, MetricsRow};
use staged_alae::dataset::{array_to_image, decode_png, encode_png, image_to_array};
use tower_http::services::ServeDir;

pub struct AppState {
    /// EMA weights in `F` and `G`.
    pub model: Alae<f32>,
    pub concepts: Vec<ConceptVector>,
    pub checkpoint: String,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn bad_request(message: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::BAD_REQUEST,
            code: "bad_request",
            message: message.into(),
        }
    }

    fn internal(message: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            code: "internal",
            message: message.into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": { "code": self.code, "message": self.message } }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentBody {
    pub w: Vec<f32>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EditBody {
    w: Vec<f32>,
    concept: String,
    alpha: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct InterpolateBody {
    w1: Vec<f32>,
    w2: Vec<f32>,
    t: f64,
    #[serde(default = "linear")]
    mode: String,
}

fn linear() -> String {
    "linear".into()
}

#[derive(Deserialize)]
struct SampleQuery {
    seed: Option<u64>,
}

#[derive(Serialize)]
struct ConceptInfo<'a> {
    name: &'a str,
    positive_class: &'a str,
    negative_class: &'a str,
    metrics: &'a [MetricsRow],
    direction: &'a [f64],
}

fn parse<T: serde::de::DeserializeOwned>(body: &[u8]) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("malformed JSON body: {e}")))
}

fn check_latent(state: &AppState, w: &[f32], field: &str) -> ApiResult<()> {
    let dim = state.model.latent_dim();
    if w.len() != dim {
        return Err(ApiError::bad_request(format!("`{field}` must hold {dim} floats, got {}", w.len())));
    }
    if w.iter().any(|v| !v.is_finite()) {
        return Err(ApiError::bad_request(format!("`{field}` contains non-finite values")));
    }
    Ok(())
}

fn latent_response(w: Vec<f32>) -> Json<LatentBody> {
    Json(LatentBody { w })
}

fn to_f64(w: &[f32]) -> Vec<f64> {
    w.iter().map(|&v| v as f64).collect()
}

fn to_f32(w: &[f64]) -> Vec<f32> {
    w.iter().map(|&v| v as f32).collect()
}

/// Runs CPU-bound inference off the async executor.
async fn blocking<T: Send + 'static>(
    state: &Arc<AppState>,
    f: impl FnOnce(&AppState) -> ApiResult<T> + Send + 'static,
) -> ApiResult<T> {
    let state = state.clone();
    tokio::task::spawn_blocking(move || f(&state))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?
}

async fn encode(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Json<LatentBody>> {
    let img = decode_png(&body).map_err(|e| ApiError::bad_request(e.to_string()))?;
    let res = state.model.ae.schedule.input_resolution as u32;
    if img.dimensions() != (res, res) {
        let (w, h) = img.dimensions();
        return Err(ApiError::bad_request(format!("image must be {res}x{res}, got {w}x{h}")));
    }
    blocking(&state, move |s| {
        let x = image_to_array(&img).insert_axis(Axis(0));
        let w = s.model.encode_e(&x).map_err(|e| ApiError::internal(e.to_string()))?;
        Ok(latent_response(w.row(0).to_vec()))
    })
    .await
}

async fn decode(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Response> {
    let LatentBody { w } = parse(&body)?;
    check_latent(&state, &w, "w")?;
    let png = blocking(&state, move |s| {
        let w = Array2::from_shape_vec((1, w.len()), w).expect("checked length");
        let x = s.model.generate_g(&w).map_err(|e| ApiError::internal(e.to_string()))?;
        Ok(encode_png(&array_to_image(x.index_axis(Axis(0), 0))))
    })
    .await?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

async fn edit(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Response> {
    let body: EditBody = parse(&body)?;
    check_latent(&state, &body.w, "w")?;
    if !body.alpha.is_finite() {
        return Err(ApiError::bad_request("`alpha` must be finite"));
    }
    let Some(concept) = state.concepts.iter().find(|c| c.task.as_str() == body.concept) else {
        return Ok(ApiError {
            status: StatusCode::NOT_FOUND,
            code: "unknown_concept",
            message: format!("no concept named `{}`", body.concept),
        }
        .into_response());
    };
    let w = edit_latent(&to_f64(&body.w), concept, body.alpha).map_err(|e| ApiError::bad_request(e.to_string()))?;
    Ok(latent_response(to_f32(&w)).into_response())
}

async fn interpolate_handler(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Json<LatentBody>> {
    let body: InterpolateBody = parse(&body)?;
    check_latent(&state, &body.w1, "w1")?;
    check_latent(&state, &body.w2, "w2")?;
    let mode: InterpolationMode = body.mode.parse().map_err(ApiError::bad_request)?;
    if !(0.0..=1.0).contains(&body.t) {
        return Err(ApiError::bad_request("`t` must lie in [0, 1]"));
    }
    let w = interpolate(&to_f64(&body.w1), &to_f64(&body.w2), body.t, mode)
        .map_err(|e| ApiError::bad_request(e.to_string()))?;
    Ok(latent_response(to_f32(&w)))
}

async fn sample(
    State(state): State<Arc<AppState>>,
    query: Result<Query<SampleQuery>, axum::extract::rejection::QueryRejection>,
) -> ApiResult<Json<LatentBody>> {
    let Query(q) = query.map_err(|e| ApiError::bad_request(e.body_text()))?;
    let seed = q.seed.ok_or_else(|| ApiError::bad_request("missing `seed` query parameter"))?;
    blocking(&state, move |s| {
        let z = sample_normal::<f32>(1, s.model.latent_dim(), &mut ChaCha8Rng::seed_from_u64(seed));
        let w = s.model.map_f(&z).map_err(|e| ApiError::internal(e.to_string()))?;
        Ok(latent_response(w.row(0).to_vec()))
    })
    .await
}

async fn concepts(State(state): State<Arc<AppState>>) -> Response {
    let list: Vec<ConceptInfo<'_>> = state
        .concepts
        .iter()
        .map(|c| ConceptInfo {
            name: c.task.as_str(),
            positive_class: &c.positive_class,
            negative_class: &c.negative_class,
            metrics: &c.metrics,
            direction: &c.direction,
        })
        .collect();
    Json(list).into_response()
}

async fn health(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(json!({ "status": "ok", "checkpoint": state.checkpoint }))
}

async fn not_found() -> ApiError {
    ApiError {
        status: StatusCode::NOT_FOUND,
        code: "not_found",
        message: "no such route".into(),
    }
}

pub fn router(state: AppState, ui_dir: Option<PathBuf>) -> Router {
    let mut app = Router::new()
        .route("/encode", post(encode))
        .route("/decode", post(decode))
        .route("/edit", post(edit))
        .route("/interpolate", post(interpolate_handler))
        .route("/sample", get(sample))
        .route("/concepts", get(concepts))
        .route("/health", get(health));
    if let Some(dir) = ui_dir {
        app = app.nest_service("/ui", ServeDir::new(dir).append_index_html_on_directories(true));
    }
    app.fallback(not_found).with_state(Arc::new(state))
}
