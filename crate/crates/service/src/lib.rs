//! HTTP service for interactive constrained pose alignment.
//!
//! A session holds a mesh, a rectified rig, a stereo background pair and the
//! current model→camera pose. Clients nudge the pose with small camera
//! rotations and an axial translation, fetch overlay renders, preview the
//! reference the current pose would produce and commit poses for later
//! averaging. Input paths in requests are resolved relative to the data
//! directory; commits are persisted under `<data>/sessions/<id>/`.

// `!(x > 0.0)` style checks are intended to reject NaN too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Component, Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::rejection::JsonRejection;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use stereoref_core::dataset::{self, color_png_bytes, read_color_png};
use stereoref_core::image::ColorImage;
use stereoref_core::mesh::{load_mesh, TriangleMesh};
use stereoref_core::posefile::{format_pose, read_markers, read_pose};
use stereoref_core::reference::{generate_reference, range_stats, MaskLabel, RangeStats, ReferenceConfig};
use stereoref_core::render::{render_overlay, RenderConfig, RenderMode};
use stereoref_core::rig::{Eye, RectifiedRig};
use stereoref_core::se3::{constrained_adjust, initial_pose_from_markers, RigidTransform, DEFAULT_DZ_BOUND};
use thiserror::Error;
use tokio::sync::{Mutex, RwLock};
use uuid::Uuid;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Error, Debug)]
pub enum ApiError {
    #[error("session {0} not found")]
    NotFound(String),
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    Internal(String),
}

impl ApiError {
    fn status(&self) -> StatusCode {
        match self {
            ApiError::NotFound(_) => StatusCode::NOT_FOUND,
            ApiError::Invalid(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ApiError::Conflict(_) => StatusCode::CONFLICT,
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status(), Json(json!({ "error": self.to_string() }))).into_response()
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        ApiError::Invalid(r.body_text())
    }
}

fn invalid(e: impl std::fmt::Display) -> ApiError {
    ApiError::Invalid(e.to_string())
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CreateSession {
    pub mesh: String,
    /// Dataset-style `calibration.json`.
    pub calib: String,
    /// Entry of `calib` to use; optional when the file holds a single id.
    pub calib_id: Option<String>,
    pub left: String,
    pub right: String,
    pub markers: Option<String>,
    pub pose: Option<String>,
    pub near: Option<f64>,
    pub far: Option<f64>,
    pub margin: Option<f64>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Delta {
    #[serde(default)]
    pub rx: f64,
    #[serde(default)]
    pub ry: f64,
    #[serde(default)]
    pub rz: f64,
    #[serde(default)]
    pub dz: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CommitRequest {
    #[serde(default)]
    pub operator: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommitEntry {
    pub index: usize,
    pub operator: String,
    /// Seconds since the Unix epoch.
    pub timestamp: f64,
    pub pose: [[f64; 4]; 4],
    pub dz: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub id: String,
    pub pose: [[f64; 4]; 4],
    /// Accumulated axial translation, mm.
    pub dz: f64,
    pub dz_bound: f64,
    pub width: u32,
    pub height: u32,
    pub near: f64,
    pub far: f64,
    pub margin: f64,
    pub commits: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preview {
    pub depth: Option<RangeStats>,
    pub disparity: Option<RangeStats>,
    pub valid_percent: f64,
    pub occluded_left_percent: f64,
    pub occluded_right_percent: f64,
    pub occluded_percent: f64,
    pub non_overlap_percent: f64,
    pub outside_model_percent: f64,
}

pub fn pose_matrix(pose: &RigidTransform) -> [[f64; 4]; 4] {
    let m = pose.to_homogeneous();
    std::array::from_fn(|i| std::array::from_fn(|j| m[(i, j)]))
}

struct Session {
    id: Uuid,
    mesh: Arc<TriangleMesh>,
    rig: RectifiedRig,
    left: Arc<ColorImage>,
    right: Arc<ColorImage>,
    pose: RigidTransform,
    dz: f64,
    render: RenderConfig,
    margin: f64,
    commits: Vec<CommitEntry>,
}

impl Session {
    fn view(&self) -> SessionView {
        SessionView {
            id: self.id.to_string(),
            pose: pose_matrix(&self.pose),
            dz: self.dz,
            dz_bound: DEFAULT_DZ_BOUND,
            width: self.rig.width(),
            height: self.rig.height(),
            near: self.render.z_near,
            far: self.render.z_far,
            margin: self.margin,
            commits: self.commits.len(),
        }
    }

    fn snapshot(&self) -> Snapshot {
        Snapshot {
            mesh: self.mesh.clone(),
            rig: self.rig,
            left: self.left.clone(),
            right: self.right.clone(),
            pose: self.pose,
            render: self.render,
            margin: self.margin,
        }
    }
}

/// Consistent copy of the data a render or preview needs.
struct Snapshot {
    mesh: Arc<TriangleMesh>,
    rig: RectifiedRig,
    left: Arc<ColorImage>,
    right: Arc<ColorImage>,
    pose: RigidTransform,
    render: RenderConfig,
    margin: f64,
}

#[derive(Clone)]
pub struct AppState {
    data_dir: Arc<PathBuf>,
    sessions: Arc<RwLock<HashMap<Uuid, Arc<Mutex<Session>>>>>,
}

impl AppState {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        Self { data_dir: Arc::new(data_dir.into()), sessions: Arc::default() }
    }

    fn resolve(&self, rel: &str) -> ApiResult<PathBuf> {
        let p = Path::new(rel);
        if rel.is_empty() || p.components().any(|c| !matches!(c, Component::Normal(_) | Component::CurDir)) {
            return Err(ApiError::Invalid(format!("path '{rel}' must be relative to the data directory")));
        }
        Ok(self.data_dir.join(p))
    }

    async fn session(&self, id: &str) -> ApiResult<Arc<Mutex<Session>>> {
        let uuid = Uuid::parse_str(id).map_err(|_| ApiError::NotFound(id.to_string()))?;
        self.sessions.read().await.get(&uuid).cloned().ok_or_else(|| ApiError::NotFound(id.to_string()))
    }
}

pub fn app(state: AppState) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/delta", post(apply_delta))
        .route("/sessions/{id}/render", get(get_render))
        .route("/sessions/{id}/commit", post(commit))
        .route("/sessions/{id}/commits", get(list_commits))
        .route("/sessions/{id}/preview", get(preview))
        .with_state(state)
}

/// Bind `addr` and serve until the task is dropped.
pub async fn serve(addr: SocketAddr, data_dir: PathBuf) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, app(AppState::new(data_dir))).await
}

async fn healthz() -> Json<serde_json::Value> {
    Json(json!({ "status": "ok", "version": VERSION }))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError::Internal(e.to_string()))?
}

fn load_calibration(path: &Path, id: Option<&str>, width: u32, height: u32) -> ApiResult<RectifiedRig> {
    let (_, calib) = dataset::read_calibration_at(path, id).map_err(invalid)?;
    calib.rig(width, height).map_err(invalid)
}

fn build_session(state: &AppState, req: CreateSession) -> ApiResult<Session> {
    let mesh = load_mesh(&state.resolve(&req.mesh)?).map_err(invalid)?;
    let left = read_color_png(&state.resolve(&req.left)?).map_err(invalid)?;
    let right = read_color_png(&state.resolve(&req.right)?).map_err(invalid)?;
    right.check_size(left.width(), left.height()).map_err(invalid)?;
    let rig = load_calibration(&state.resolve(&req.calib)?, req.calib_id.as_deref(), left.width(), left.height())?;
    let pose = match (&req.markers, &req.pose) {
        (Some(m), None) => initial_pose_from_markers(&read_markers(&state.resolve(m)?).map_err(invalid)?).map_err(invalid)?,
        (None, Some(p)) => read_pose(&state.resolve(p)?).map_err(invalid)?,
        _ => return Err(invalid("give exactly one of 'markers' and 'pose'")),
    };
    let defaults = ReferenceConfig::default();
    let render = RenderConfig {
        z_near: req.near.unwrap_or(defaults.render.z_near),
        z_far: req.far.unwrap_or(defaults.render.z_far),
        ..defaults.render
    };
    render.validate().map_err(invalid)?;
    let margin = req.margin.unwrap_or(defaults.margin);
    if !(margin > 0.0) {
        return Err(ApiError::Invalid(format!("margin must be positive, got {margin}")));
    }
    Ok(Session {
        id: Uuid::new_v4(),
        mesh: Arc::new(mesh),
        rig,
        left: Arc::new(left),
        right: Arc::new(right),
        pose,
        dz: 0.0,
        render,
        margin,
        commits: Vec::new(),
    })
}

async fn create_session(State(state): State<AppState>, body: Result<Json<CreateSession>, JsonRejection>) -> ApiResult<Response> {
    let Json(req) = body?;
    let st = state.clone();
    let session = blocking(move || build_session(&st, req)).await?;
    let view = session.view();
    state.sessions.write().await.insert(session.id, Arc::new(Mutex::new(session)));
    Ok((StatusCode::CREATED, Json(view)).into_response())
}

async fn get_session(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<SessionView>> {
    let s = state.session(&id).await?;
    let view = s.lock().await.view();
    Ok(Json(view))
}

async fn apply_delta(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    body: Result<Json<Delta>, JsonRejection>,
) -> ApiResult<Json<SessionView>> {
    let s = state.session(&id).await?;
    let Json(d) = body?;
    let mut session = s.lock().await;
    let dz_total = session.dz + d.dz;
    if dz_total.abs() > DEFAULT_DZ_BOUND {
        return Err(ApiError::Conflict(format!(
            "accumulated axial translation {dz_total} mm would exceed ±{DEFAULT_DZ_BOUND} mm"
        )));
    }
    session.pose = constrained_adjust(&session.pose, d.rx, d.ry, d.rz, d.dz, DEFAULT_DZ_BOUND).map_err(invalid)?;
    session.dz = dz_total;
    Ok(Json(session.view()))
}

#[derive(Debug, Deserialize)]
pub struct RenderQuery {
    #[serde(default = "default_eye")]
    eye: String,
    #[serde(default)]
    mode: Option<String>,
    #[serde(default = "default_alpha")]
    alpha: f64,
    #[serde(default)]
    swap: bool,
}

fn default_eye() -> String {
    "left".into()
}

fn default_alpha() -> f64 {
    0.5
}

fn render_view(snap: &Snapshot, eye: Eye, config: &RenderConfig) -> ApiResult<ColorImage> {
    let background = match eye {
        Eye::Left => &snap.left,
        Eye::Right => &snap.right,
    };
    render_overlay(&snap.mesh, &snap.rig, eye, &snap.pose, config, background).map_err(|e| ApiError::Internal(e.to_string()))
}

async fn get_render(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<RenderQuery>,
) -> ApiResult<Response> {
    let s = state.session(&id).await?;
    let snap = s.lock().await.snapshot();
    let mode: RenderMode = q.mode.as_deref().unwrap_or("solid").parse().map_err(ApiError::Invalid)?;
    let config = RenderConfig { mode, alpha: q.alpha, ..snap.render };
    config.validate().map_err(invalid)?;
    let eye = q.eye.clone();
    let png = blocking(move || {
        let image = match eye.as_str() {
            "left" => render_view(&snap, Eye::Left, &config)?,
            "right" => render_view(&snap, Eye::Right, &config)?,
            "pair" => {
                let (l, r) = (render_view(&snap, Eye::Left, &config)?, render_view(&snap, Eye::Right, &config)?);
                let (a, b) = if q.swap { (r, l) } else { (l, r) };
                ColorImage::side_by_side(&a, &b).map_err(|e| ApiError::Internal(e.to_string()))?
            }
            other => return Err(ApiError::Invalid(format!("eye must be left, right or pair, got '{other}'"))),
        };
        Ok(color_png_bytes(&image))
    })
    .await?;
    Ok(([(header::CONTENT_TYPE, "image/png")], Bytes::from(png)).into_response())
}

fn now_seconds() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

fn persist_commit(dir: &Path, entry: &CommitEntry, pose: &RigidTransform, all: &[CommitEntry]) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(format!("commit_{:03}.pose", entry.index)), format_pose(pose))?;
    let text = serde_json::to_string_pretty(all).map_err(std::io::Error::other)?;
    std::fs::write(dir.join("commits.json"), text + "\n")
}

async fn commit(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    body: Result<Json<CommitRequest>, JsonRejection>,
) -> ApiResult<Response> {
    let s = state.session(&id).await?;
    let Json(req) = body?;
    let mut session = s.lock().await;
    let entry = CommitEntry {
        index: session.commits.len(),
        operator: req.operator,
        timestamp: now_seconds(),
        pose: pose_matrix(&session.pose),
        dz: session.dz,
    };
    let mut all = session.commits.clone();
    all.push(entry.clone());
    let dir = state.data_dir.join("sessions").join(session.id.to_string());
    persist_commit(&dir, &entry, &session.pose, &all).map_err(|e| ApiError::Internal(format!("{}: {e}", dir.display())))?;
    session.commits = all;
    Ok((StatusCode::CREATED, Json(entry)).into_response())
}

async fn list_commits(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Vec<CommitEntry>>> {
    let s = state.session(&id).await?;
    let commits = s.lock().await.commits.clone();
    Ok(Json(commits))
}

fn compute_preview(snap: &Snapshot) -> ApiResult<Preview> {
    let config = ReferenceConfig { render: snap.render, margin: snap.margin };
    let b = generate_reference(&snap.mesh, &snap.rig, &snap.pose, &config).map_err(|e| ApiError::Internal(e.to_string()))?;
    let pct = |l| b.mask.percent(l);
    Ok(Preview {
        depth: range_stats(&b.depth_left, Some(&b.mask)).ok(),
        disparity: range_stats(&b.disparity, Some(&b.mask)).ok(),
        valid_percent: pct(MaskLabel::Valid),
        occluded_left_percent: pct(MaskLabel::OccludedLeft),
        occluded_right_percent: pct(MaskLabel::OccludedRight),
        occluded_percent: pct(MaskLabel::OccludedLeft) + pct(MaskLabel::OccludedRight),
        non_overlap_percent: pct(MaskLabel::NonOverlap),
        outside_model_percent: pct(MaskLabel::OutsideModel),
    })
}

async fn preview(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Preview>> {
    let s = state.session(&id).await?;
    let snap = s.lock().await.snapshot();
    Ok(Json(blocking(move || compute_preview(&snap)).await?))
}
