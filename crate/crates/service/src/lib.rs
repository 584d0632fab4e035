//! Local HTTP JSON service over trained BranchGAN checkpoints.
//!
//! | method | path | body | response |
//! |---|---|---|---|
//! | GET | `/models` | | `[ModelHandle]` |
//! | POST | `/generate` | `{model, latent?, seed?}` | `{image, latent}` |
//! | POST | `/sweep` | `{model, latent, t, p_values}` | `{images, latents, variance_image, variance_total}` |
//! | POST | `/fuse` | `{model, a, b, take_from_a}` | `{image, latent}` |
//! | POST | `/candidates` | `{model, fixed, t, count, seed}` | `{candidates: [{image, latent}]}` |
//! | POST | `/edit` | `{model, constraints, config?, seed?}` | `JobTicket` |
//! | GET | `/jobs/{id}` | | `JobTicket` |
//!
//! Images are base64 PNG. Sending `Accept: image/png` to `/generate`,
//! `/fuse`, `/sweep` or `/candidates` returns the image (or a left-to-right
//! strip of all images) as raw PNG instead. Every response carries the full
//! latents a client needs to continue, so the server keeps no session state.

pub mod config;
pub mod jobs;
pub mod payload;

use std::collections::BTreeSet;
use std::sync::Arc;

use axum::extract::{Path, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use branchgan::imaging::strip;
use branchgan::spectral::variance_image;
use branchgan::{
    constant_sweep, fuse, rng, sample_latent, BranchedLatent, EditConfig, Image, Network, SamplePolicy,
    SubvectorSource,
};
use serde::{Deserialize, Serialize};

pub use config::{load_models, LoadedModel, ModelEntry, ModelHandle, Registry, ServiceConfig};
pub use jobs::{EditOutcome, JobQueue, JobStatus, JobTicket};
pub use payload::{ConstraintsPayload, ImagePayload};

/// Upper bound on images produced by one sweep or candidate request.
pub const MAX_BATCH: usize = 256;

#[derive(Clone)]
pub struct AppState {
    pub models: Registry,
    pub jobs: JobQueue,
}

impl AppState {
    /// Must be called inside a tokio runtime (starts the job coordinator).
    pub fn new(models: Registry, queue_capacity: usize) -> Self {
        AppState {
            models,
            jobs: JobQueue::start(queue_capacity),
        }
    }

    fn model(&self, id: &str) -> Result<Arc<LoadedModel>, ApiError> {
        self.models
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown model '{id}'")))
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/models", get(list_models))
        .route("/generate", post(generate))
        .route("/sweep", post(sweep))
        .route("/fuse", post(fuse_latents))
        .route("/candidates", post(candidates))
        .route("/edit", post(edit))
        .route("/jobs/{id}", get(job))
        .with_state(state)
}

/// Loads the configured checkpoints and serves until the process stops.
pub async fn serve(config: ServiceConfig, bind: &str) -> std::io::Result<()> {
    let models = load_models(&config.models).map_err(std::io::Error::other)?;
    let app = router(AppState::new(models, config.queue_capacity));
    let listener = tokio::net::TcpListener::bind(bind).await?;
    tracing::info!(addr = %listener.local_addr()?, models = config.models.len(), "serving");
    axum::serve(listener, app).await
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
        }
    }

    fn bad(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, message)
    }
}

impl From<branchgan::Error> for ApiError {
    fn from(e: branchgan::Error) -> Self {
        ApiError::bad(e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn wants_png(headers: &HeaderMap) -> bool {
    headers
        .get(header::ACCEPT)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.contains("image/png"))
}

fn png_response(image: &Image) -> ApiResult<Response> {
    let bytes = image
        .to_png_bytes()
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

fn encode(image: &Image) -> ApiResult<String> {
    payload::encode_png(image).map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e))
}

/// Runs CPU-bound work off the async executor.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
}

async fn list_models(State(s): State<AppState>) -> Json<Vec<ModelHandle>> {
    Json(s.models.values().map(|m| m.handle.clone()).collect())
}

#[derive(Debug, Deserialize)]
pub struct GenerateRequest {
    pub model: String,
    pub latent: Option<BranchedLatent>,
    pub seed: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ImageWithLatent {
    pub image: String,
    pub latent: BranchedLatent,
}

async fn generate(State(s): State<AppState>, headers: HeaderMap, Json(req): Json<GenerateRequest>) -> ApiResult<Response> {
    let m = s.model(&req.model)?;
    let cfg = m.generator.config();
    let latent = match (req.latent, req.seed) {
        (Some(z), _) => {
            z.validate(cfg)?;
            z
        }
        (None, Some(seed)) => sample_latent(cfg, &SamplePolicy::uniform(cfg.branch_count()), seed)?,
        (None, None) => return Err(ApiError::bad("request needs a latent or a seed")),
    };
    let (image, latent) = blocking(move || Ok((m.generator.generate(&latent)?, latent))).await?;
    if wants_png(&headers) {
        return png_response(&image);
    }
    Ok(Json(ImageWithLatent {
        image: encode(&image)?,
        latent,
    })
    .into_response())
}

#[derive(Debug, Deserialize)]
pub struct SweepRequest {
    pub model: String,
    pub latent: BranchedLatent,
    pub t: usize,
    pub p_values: Vec<f32>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SweepResponse {
    pub images: Vec<String>,
    pub latents: Vec<BranchedLatent>,
    /// Per-pixel variance scaled for display.
    pub variance_image: String,
    pub variance_total: f64,
}

async fn sweep(State(s): State<AppState>, headers: HeaderMap, Json(req): Json<SweepRequest>) -> ApiResult<Response> {
    let m = s.model(&req.model)?;
    if req.p_values.len() < 2 {
        return Err(ApiError::bad("a sweep needs at least 2 p values to form a variance image"));
    }
    if req.p_values.len() > MAX_BATCH {
        return Err(ApiError::bad(format!("at most {MAX_BATCH} p values per sweep")));
    }
    req.latent.validate(m.generator.config())?;
    let latents = constant_sweep(&req.latent, req.t, &req.p_values)?;
    let (images, var) = blocking(move || {
        let images = m.generator.generate_batch(&latents)?;
        let var = variance_image(&images)?;
        Ok((images, var))
    })
    .await?;
    if wants_png(&headers) {
        let mut all = images.clone();
        all.push(var.display());
        return png_response(&strip(&all).expect("non-empty sweep"));
    }
    Ok(Json(SweepResponse {
        images: images.iter().map(encode).collect::<ApiResult<_>>()?,
        latents: constant_sweep(&req.latent, req.t, &req.p_values)?,
        variance_image: encode(&var.display())?,
        variance_total: var.total(),
    })
    .into_response())
}

#[derive(Debug, Deserialize)]
pub struct FuseRequest {
    pub model: String,
    pub a: BranchedLatent,
    pub b: BranchedLatent,
    pub take_from_a: BTreeSet<usize>,
}

async fn fuse_latents(State(s): State<AppState>, headers: HeaderMap, Json(req): Json<FuseRequest>) -> ApiResult<Response> {
    let m = s.model(&req.model)?;
    let cfg = m.generator.config();
    req.a.validate(cfg)?;
    req.b.validate(cfg)?;
    let latent = fuse(&req.a, &req.b, &req.take_from_a)?;
    let (image, latent) = blocking(move || Ok((m.generator.generate(&latent)?, latent))).await?;
    if wants_png(&headers) {
        return png_response(&image);
    }
    Ok(Json(ImageWithLatent {
        image: encode(&image)?,
        latent,
    })
    .into_response())
}

/// Sub-vectors already chosen for the scales coarser than `t`.
#[derive(Debug, Default, Deserialize)]
pub struct PartialLatent {
    pub subvectors: Vec<Vec<f32>>,
}

#[derive(Debug, Deserialize)]
pub struct CandidatesRequest {
    pub model: String,
    #[serde(default)]
    pub fixed: PartialLatent,
    pub t: usize,
    pub count: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CandidatesResponse {
    pub t: usize,
    pub candidates: Vec<ImageWithLatent>,
}

/// Policy that keeps the prefix, varies scale `t` and zero-feeds the rest.
fn candidate_policy(dims: &[usize], fixed: &PartialLatent, t: usize) -> ApiResult<SamplePolicy> {
    if t >= dims.len() {
        return Err(ApiError::bad(format!("scale {t} out of range for {} branches", dims.len())));
    }
    if fixed.subvectors.len() != t {
        return Err(ApiError::bad(format!(
            "fixed prefix covers {} scales, expected exactly {t}",
            fixed.subvectors.len()
        )));
    }
    let mut sources: Vec<SubvectorSource> = fixed
        .subvectors
        .iter()
        .map(|v| SubvectorSource::Constant { values: v.clone() })
        .collect();
    sources.push(SubvectorSource::Uniform { alpha: 1.0 });
    sources.resize(dims.len(), SubvectorSource::Frozen);
    Ok(SamplePolicy { sources })
}

async fn candidates(
    State(s): State<AppState>,
    headers: HeaderMap,
    Json(req): Json<CandidatesRequest>,
) -> ApiResult<Response> {
    let m = s.model(&req.model)?;
    if req.count == 0 || req.count > MAX_BATCH {
        return Err(ApiError::bad(format!("count must be in 1..={MAX_BATCH}")));
    }
    let cfg = m.generator.config().clone();
    let policy = candidate_policy(&cfg.subvector_dims, &req.fixed, req.t)?;
    policy.validate(&cfg)?;
    let latents = (0..req.count)
        .map(|k| sample_latent(&cfg, &policy, rng::derive(req.seed, &[req.t as u64, k as u64])))
        .collect::<branchgan::Result<Vec<_>>>()?;
    let (images, latents) = blocking(move || Ok((m.generator.generate_batch(&latents)?, latents))).await?;
    if wants_png(&headers) {
        return png_response(&strip(&images).expect("non-empty grid"));
    }
    let candidates = images
        .iter()
        .zip(latents)
        .map(|(im, latent)| {
            Ok(ImageWithLatent {
                image: encode(im)?,
                latent,
            })
        })
        .collect::<ApiResult<_>>()?;
    Ok(Json(CandidatesResponse { t: req.t, candidates }).into_response())
}

#[derive(Debug, Deserialize)]
pub struct EditRequest {
    pub model: String,
    pub constraints: ConstraintsPayload,
    pub config: Option<EditConfig>,
    #[serde(default)]
    pub seed: u64,
}

async fn edit(State(s): State<AppState>, Json(req): Json<EditRequest>) -> ApiResult<(StatusCode, Json<JobTicket>)> {
    let m = s.model(&req.model)?;
    let mut config = req.config.unwrap_or_default();
    if m.encoder.is_none() && config.init == branchgan::InitMode::Encoder {
        // without an encoder the only meaningful default start is random
        config.init = branchgan::InitMode::Random;
    }
    let prepared = config
        .validate()
        .map_err(|e| e.to_string())
        .and_then(|()| {
            req.constraints
                .decode(m.generator.resolution(), m.generator.config().output_channels)
                .map_err(|e| format!("invalid constraints: {e}"))
        });
    let ticket = match prepared {
        Ok(constraints) => s
            .jobs
            .submit(m, constraints, config, req.seed)
            .map_err(|_| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "edit queue is full"))?,
        Err(reason) => s.jobs.reject(&req.model, reason),
    };
    Ok((StatusCode::ACCEPTED, Json(ticket)))
}

async fn job(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<JobTicket>> {
    s.jobs
        .get(&id)
        .map(Json)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown job '{id}'")))
}
