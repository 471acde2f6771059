//! JSON-over-HTTP front end. Latents live server-side and are referenced by
//! content-derived ids.

use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Multipart, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;

use crate::compositor::RenderMode;
use crate::error::Error;
use crate::fields::{sample_z, LatentW};
use crate::image::{Image, Mask};
use crate::io::sha256_hex;
use crate::pipeline::sample_part_latents;
use crate::renderer::{Camera, SeededRng};
use crate::workflow::{ModelKind, Model, Pose, Workspace};

/// Largest side length served by `/render` and accepted by `/invert`.
pub const MAX_RENDER_SIDE: usize = 128;

const CHECKPOINTS: [(&str, ModelKind); 2] = [("parts", ModelKind::Parts), ("baseline", ModelKind::Baseline)];

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

    fn bad(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "invalid_argument", message)
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let (status, code) = match &e {
            Error::Shape { .. } | Error::InvalidArgument(_) => (StatusCode::BAD_REQUEST, "invalid_argument"),
            Error::Config(_) => (StatusCode::BAD_REQUEST, "config"),
            Error::Format { .. } => (StatusCode::UNPROCESSABLE_ENTITY, "malformed"),
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => (StatusCode::NOT_FOUND, "not_found"),
            Error::Io { .. } => (StatusCode::INTERNAL_SERVER_ERROR, "io"),
            Error::NonFinite { .. } | Error::Divergence { .. } => (StatusCode::INTERNAL_SERVER_ERROR, "numeric"),
        };
        Self::new(status, code, e.to_string())
    }
}

#[derive(Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            code: self.code.into(),
            message: self.message,
        };
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

#[derive(Clone)]
struct StoredLatent {
    checkpoint: String,
    w: Vec<f64>,
}

struct AppState {
    ws: Workspace,
    models: Mutex<HashMap<String, Arc<Model>>>,
    latents: Mutex<HashMap<String, StoredLatent>>,
    permits: Semaphore,
}

impl AppState {
    fn model(&self, id: &str) -> ApiResult<Arc<Model>> {
        if let Some(m) = self.models.lock().expect("model cache").get(id) {
            return Ok(m.clone());
        }
        let kind = CHECKPOINTS
            .iter()
            .find(|(name, _)| *name == id)
            .map(|(_, k)| *k)
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "unknown_checkpoint", format!("no checkpoint {id:?}")))?;
        let m = Arc::new(self.ws.load_model(kind)?);
        self.models.lock().expect("model cache").insert(id.to_string(), m.clone());
        Ok(m)
    }

    fn store(&self, checkpoint: &str, part: &str, w: &LatentW) -> String {
        let mut bytes = Vec::with_capacity(8 * w.0.len() + 64);
        bytes.extend_from_slice(checkpoint.as_bytes());
        bytes.push(0);
        bytes.extend_from_slice(part.as_bytes());
        bytes.push(0);
        for v in &w.0 {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let id = sha256_hex(&bytes)[..24].to_string();
        self.latents.lock().expect("latent store").insert(
            id.clone(),
            StoredLatent {
                checkpoint: checkpoint.to_string(),
                w: w.0.clone(),
            },
        );
        id
    }

    fn fetch(&self, checkpoint: &str, id: &str) -> ApiResult<LatentW> {
        let s = self
            .latents
            .lock()
            .expect("latent store")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "unknown_latent", format!("no latent {id:?}")))?;
        if s.checkpoint != checkpoint {
            return Err(ApiError::bad(format!("latent {id} belongs to checkpoint {:?}", s.checkpoint)));
        }
        Ok(LatentW(s.w))
    }

    fn fetch_all(&self, checkpoint: &str, model: &Model, ids: &[String]) -> ApiResult<Vec<LatentW>> {
        if ids.len() != model.parts.len() {
            return Err(ApiError::bad(format!("expected {} latent ids, got {}", model.parts.len(), ids.len())));
        }
        ids.iter().map(|id| self.fetch(checkpoint, id)).collect()
    }

    fn camera(&self, pose: Pose, side: Option<usize>) -> ApiResult<Camera> {
        let side = side.unwrap_or(self.ws.cfg.train.cameras.lens.resolution);
        if side == 0 || side > MAX_RENDER_SIDE {
            return Err(ApiError::bad(format!("render size must be in 1..={MAX_RENDER_SIDE}, got {side}")));
        }
        Ok(self.ws.camera(pose)?.with_resolution(side, side))
    }
}

/// Runs `f` on the blocking pool once a render permit is free.
async fn blocking<T, F>(state: &Arc<AppState>, f: F) -> ApiResult<T>
where
    T: Send + 'static,
    F: FnOnce(&AppState) -> ApiResult<T> + Send + 'static,
{
    let _permit = state.permits.acquire().await.map_err(|_| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "shutdown", "server closing"))?;
    let st = state.clone();
    tokio::task::spawn_blocking(move || f(&st))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
}

fn parse_json<T: for<'de> Deserialize<'de>>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad(format!("bad request body: {e}")))
}

fn default_checkpoint() -> String {
    "parts".into()
}

fn yes() -> bool {
    true
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRequest {
    #[serde(default = "default_checkpoint")]
    pub checkpoint: String,
    /// Name or index; all parts when absent.
    pub part: Option<String>,
    #[serde(default)]
    pub seed: u64,
    /// One latent shared by all parts.
    #[serde(default)]
    pub tie: bool,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LatentsResponse {
    pub checkpoint: String,
    pub parts: Vec<String>,
    pub latent_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub losses: Vec<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderRequest {
    #[serde(default = "default_checkpoint")]
    pub checkpoint: String,
    pub latent_ids: Vec<String>,
    #[serde(default)]
    pub pose: Pose,
    pub whiteout_part: Option<String>,
    pub size: Option<usize>,
    #[serde(default = "yes")]
    pub use_blend: bool,
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum EditSourceBody {
    LatentId(String),
    Seed(u64),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditRequest {
    #[serde(default = "default_checkpoint")]
    pub checkpoint: String,
    pub latent_ids: Vec<String>,
    pub part: String,
    pub source: EditSourceBody,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CheckpointInfo {
    pub id: String,
    pub parts: Vec<String>,
    pub has_blend: bool,
    pub config_hash: Option<String>,
}

async fn sample(State(st): State<Arc<AppState>>, body: Bytes) -> ApiResult<Json<LatentsResponse>> {
    let req: SampleRequest = parse_json(&body)?;
    blocking(&st, move |st| {
        let model = st.model(&req.checkpoint)?;
        let mut rng = SeededRng::seed_from_u64(req.seed);
        let names = model.names();
        let (parts, ws) = match &req.part {
            Some(p) => {
                let i = model.part_index(p)?;
                let g = &model.parts[i];
                let w = g.map_latent(&sample_z(&mut rng, g.latent_dim())?)?;
                (vec![names[i].clone()], vec![w])
            }
            None => (names.clone(), sample_part_latents(&model.refs(), req.tie, &mut rng)?),
        };
        let latent_ids = parts.iter().zip(&ws).map(|(n, w)| st.store(&req.checkpoint, n, w)).collect();
        Ok(Json(LatentsResponse {
            checkpoint: req.checkpoint,
            parts,
            latent_ids,
            losses: vec![],
        }))
    })
    .await
}

async fn render(State(st): State<Arc<AppState>>, body: Bytes) -> ApiResult<Response> {
    let req: RenderRequest = parse_json(&body)?;
    let png = blocking(&st, move |st| {
        let model = st.model(&req.checkpoint)?;
        let ws = st.fetch_all(&req.checkpoint, &model, &req.latent_ids)?;
        let mode = match &req.whiteout_part {
            Some(p) => RenderMode::Whiteout(model.part_index(p)?),
            None => RenderMode::Composite,
        };
        let cam = st.camera(req.pose, req.size)?;
        let img = model.render(&ws, &cam, st.ws.cfg.render.samples, req.use_blend, mode)?.image;
        Ok(st.ws.png_bytes(&img))
    })
    .await?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

async fn edit(State(st): State<Arc<AppState>>, body: Bytes) -> ApiResult<Json<LatentsResponse>> {
    let req: EditRequest = parse_json(&body)?;
    blocking(&st, move |st| {
        let model = st.model(&req.checkpoint)?;
        st.fetch_all(&req.checkpoint, &model, &req.latent_ids)?;
        let part = model.part_index(&req.part)?;
        let names = model.names();
        let w = match req.source {
            EditSourceBody::LatentId(id) => st.fetch(&req.checkpoint, &id)?,
            EditSourceBody::Seed(seed) => {
                let g = &model.parts[part];
                g.map_latent(&sample_z(&mut SeededRng::seed_from_u64(seed), g.latent_dim())?)?
            }
        };
        if w.dim() != model.parts[part].latent_dim() {
            return Err(ApiError::bad("source latent has the wrong dimension"));
        }
        let mut latent_ids = req.latent_ids.clone();
        latent_ids[part] = st.store(&req.checkpoint, &names[part], &w);
        Ok(Json(LatentsResponse {
            checkpoint: req.checkpoint,
            parts: names,
            latent_ids,
            losses: vec![],
        }))
    })
    .await
}

async fn invert(State(st): State<Arc<AppState>>, mut form: Multipart) -> ApiResult<Json<LatentsResponse>> {
    let origin = Path::new("upload");
    let mut image = None;
    let mut masks = Vec::new();
    let mut pose = Pose::default();
    let mut checkpoint = default_checkpoint();
    let mut seed = 0u64;
    let mut use_blend = true;
    while let Some(field) = form.next_field().await.map_err(|e| ApiError::bad(e.to_string()))? {
        let name = field.name().unwrap_or_default().to_string();
        let data = field.bytes().await.map_err(|e| ApiError::bad(e.to_string()))?;
        let text = || String::from_utf8_lossy(&data).trim().to_string();
        match name.as_str() {
            "image" => image = Some(Image::from_png_bytes(&data, origin)?),
            "mask" => masks.push(Mask::from_png_bytes(&data, origin)?),
            "pose" => pose = text().parse().map_err(ApiError::bad)?,
            "checkpoint" => checkpoint = text(),
            "seed" => seed = text().parse().map_err(|e| ApiError::bad(format!("seed: {e}")))?,
            "use_blend" => use_blend = text().parse().map_err(|e| ApiError::bad(format!("use_blend: {e}")))?,
            other => return Err(ApiError::bad(format!("unexpected form field {other:?}"))),
        }
    }
    let target = image.ok_or_else(|| ApiError::bad("missing image field"))?;
    if target.width != target.height || target.width > MAX_RENDER_SIDE {
        return Err(ApiError::bad(format!("target must be square and at most {MAX_RENDER_SIDE} pixels wide")));
    }
    blocking(&st, move |st| {
        let model = st.model(&checkpoint)?;
        let cam = st.camera(pose, Some(target.width))?;
        let masks = if masks.is_empty() { None } else { Some(masks) };
        let file = st.ws.invert(&model, &target, masks, cam, use_blend, seed)?;
        let latent_ids = file
            .part_names
            .iter()
            .zip(file.latents())
            .map(|(n, w)| st.store(&checkpoint, n, &w))
            .collect();
        Ok(Json(LatentsResponse {
            checkpoint,
            parts: file.part_names,
            latent_ids,
            losses: file.losses,
        }))
    })
    .await
}

async fn checkpoints(State(st): State<Arc<AppState>>) -> ApiResult<Json<Vec<CheckpointInfo>>> {
    blocking(&st, |st| {
        let mut out = Vec::new();
        for (id, kind) in CHECKPOINTS {
            let dir = match kind {
                ModelKind::Parts => st.ws.models(),
                ModelKind::Baseline => st.ws.baseline(),
            };
            if !dir.parts_manifest().exists() {
                continue;
            }
            let model = st.model(id)?;
            let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.parts_manifest()).map_err(|e| Error::io(dir.parts_manifest(), e))?)
                .map_err(|e| Error::format(dir.parts_manifest(), e.to_string()))?;
            out.push(CheckpointInfo {
                id: id.to_string(),
                parts: model.names(),
                has_blend: model.blend.is_some(),
                config_hash: manifest.get("config_hash").and_then(|v| v.as_str()).map(str::to_string),
            });
        }
        Ok(Json(out))
    })
    .await
}

async fn fallback() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such endpoint")
}

pub fn router(ws: Workspace) -> Router {
    let permits = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let state = Arc::new(AppState {
        ws,
        models: Mutex::new(HashMap::new()),
        latents: Mutex::new(HashMap::new()),
        permits: Semaphore::new(permits),
    });
    Router::new()
        .route("/sample", post(sample))
        .route("/render", post(render))
        .route("/edit", post(edit))
        .route("/invert", post(invert))
        .route("/checkpoints", get(checkpoints))
        .fallback(fallback)
        .with_state(state)
}

/// Blocks serving on `host:port` until the process is stopped.
pub fn serve(ws: Workspace, host: &str, port: u16) -> crate::Result<()> {
    let addr = format!("{host}:{port}");
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| Error::io(&addr, e))?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(&addr).await.map_err(|e| Error::io(&addr, e))?;
        log::info!("listening on {addr}");
        axum::serve(listener, router(ws)).await.map_err(|e| Error::io(&addr, e))
    })
}
