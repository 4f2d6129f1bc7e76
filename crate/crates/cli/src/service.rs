//! HTTP service: design inference and preview raytraces for the explorer UI.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use axum::extract::{rejection::JsonRejection, State};
use axum::http::StatusCode;
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use lumenforge::designgen::{training_box, TargetSpec};
use lumenforge::optics::{evaluate_design, ScenarioKind};
use lumenforge::shsurface::{radial_profile, SurfaceModel};
use lumenforge::surrogate::{infer_design, load_model, MlpModel};
use lumenforge::{Error, Result, SCHEMA_VERSION};
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;

pub const DEFAULT_ADDR: &str = "127.0.0.1:8080";
pub const DEFAULT_MAX_RAYS: usize = 500_000;
const PROFILE_SAMPLES: usize = 64;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub addr: String,
    pub models: Vec<PathBuf>,
    pub max_rays: usize,
    /// Concurrent trace jobs; further trace requests get 503.
    pub trace_workers: usize,
    pub static_dir: Option<PathBuf>,
}

pub fn split_list(s: &str) -> Vec<PathBuf> {
    s.split(',').map(str::trim).filter(|p| !p.is_empty()).map(PathBuf::from).collect()
}

impl ServiceConfig {
    pub fn from_env() -> Result<Self> {
        let cores = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
        let max_rays = match std::env::var("LUMENFORGE_MAX_RAYS") {
            Ok(v) => v.parse().map_err(|_| Error::InvalidArgument(format!("LUMENFORGE_MAX_RAYS={v:?}")))?,
            Err(_) => DEFAULT_MAX_RAYS,
        };
        Ok(Self {
            addr: std::env::var("LUMENFORGE_ADDR").unwrap_or_else(|_| DEFAULT_ADDR.into()),
            models: std::env::var("LUMENFORGE_MODELS").map(|m| split_list(&m)).unwrap_or_default(),
            max_rays,
            trace_workers: cores.saturating_sub(1).max(1),
            static_dir: std::env::var("LUMENFORGE_STATIC").ok().map(PathBuf::from),
        })
    }
}

pub struct AppState {
    pub models: BTreeMap<ScenarioKind, MlpModel>,
    pub max_rays: usize,
    trace_slots: Arc<Semaphore>,
}

impl AppState {
    pub fn new(models: Vec<MlpModel>, max_rays: usize, trace_workers: usize) -> Result<Self> {
        let mut map = BTreeMap::new();
        for m in models {
            let kind = m.scenario.ok_or_else(|| Error::Format("model has no scenario tag".into()))?;
            if map.insert(kind, m).is_some() {
                return Err(Error::InvalidArgument(format!("two models for {kind}")));
            }
        }
        Ok(Self { models: map, max_rays, trace_slots: Arc::new(Semaphore::new(trace_workers.max(1))) })
    }

    /// Permits for concurrent traces; a request that finds none gets 503.
    pub fn trace_slots(&self) -> &Arc<Semaphore> {
        &self.trace_slots
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateRequest {
    pub rays: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignRequest {
    pub scenario: String,
    pub params: BTreeMap<String, f64>,
    pub evaluate: Option<EvaluateRequest>,
    #[serde(default)]
    pub include_profile: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Irradiance {
    pub grid_n: usize,
    /// `[x_center, y_center, width, height]` in mm.
    pub extent_mm: [f64; 4],
    /// Smoothed map, row 0 at minimum y, normalized to mean 1.
    pub rows: Vec<Vec<f64>>,
    pub rays: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Profile {
    pub phi_deg: f64,
    /// `[theta, r]` pairs in radians and mm.
    pub points: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DesignResponse {
    pub scenario: ScenarioKind,
    pub surface: SurfaceModel,
    pub extrapolation: bool,
    pub inference_time_ms: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nonuniformity_pct: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spill_fraction: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub irradiance: Option<Irradiance>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace_time_ms: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub profiles: Option<Vec<Profile>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamRange {
    pub name: String,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioInfo {
    pub scenario: ScenarioKind,
    pub training_box: Vec<ParamRange>,
    pub grid_n: usize,
    pub kernel_px: usize,
    pub order: usize,
    pub mask: lumenforge::shsurface::MaskKind,
    pub topology: Vec<usize>,
    pub max_rays: usize,
}

pub struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(serde_json::json!({ "error": self.1 }))).into_response()
    }
}

fn bad_request(msg: impl Into<String>) -> ApiError {
    ApiError(StatusCode::BAD_REQUEST, msg.into())
}

pub fn router(state: Arc<AppState>, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/v1/design", post(handle_design))
        .route("/api/v1/scenarios", get(handle_scenarios))
        .route("/healthz", get(handle_health))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(tower_http::services::ServeDir::new(dir)),
        None => api.route("/", get(index_page)),
    }
}

async fn index_page() -> Html<&'static str> {
    Html(concat!(
        "<!doctype html><title>lumenforge</title><h1>lumenforge</h1>",
        "<p>POST /api/v1/design, GET /api/v1/scenarios, GET /healthz. ",
        "Start with --static-dir pointing at the explorer page to serve it here.</p>"
    ))
}

async fn handle_health() -> Json<serde_json::Value> {
    Json(serde_json::json!({
        "status": "ok",
        "version": env!("CARGO_PKG_VERSION"),
        "schema": SCHEMA_VERSION,
    }))
}

async fn handle_scenarios(State(st): State<Arc<AppState>>) -> Json<Vec<ScenarioInfo>> {
    let list = st
        .models
        .iter()
        .map(|(kind, m)| {
            let sc = kind.scenario();
            let training_box = TargetSpec::param_names(*kind)
                .iter()
                .zip(training_box(*kind))
                .map(|(n, (lo, hi))| ParamRange { name: n.to_string(), min: lo, max: hi })
                .collect();
            ScenarioInfo {
                scenario: *kind,
                training_box,
                grid_n: sc.grid_n,
                kernel_px: sc.kernel_px,
                order: m.order.unwrap_or(sc.order),
                mask: m.mask.unwrap_or(sc.mask),
                topology: m.topology.sizes().to_vec(),
                max_rays: st.max_rays,
            }
        })
        .collect();
    Json(list)
}

fn parse_target(kind: ScenarioKind, params: &BTreeMap<String, f64>) -> std::result::Result<TargetSpec, ApiError> {
    let names = TargetSpec::param_names(kind);
    if let Some(extra) = params.keys().find(|k| !names.contains(&k.as_str())) {
        return Err(bad_request(format!("unknown parameter {extra:?} for {kind}")));
    }
    let p: Vec<f64> = names
        .iter()
        .map(|n| params.get(*n).copied().ok_or_else(|| bad_request(format!("missing parameter {n}"))))
        .collect::<std::result::Result<_, _>>()?;
    if p.iter().any(|v| !v.is_finite()) {
        return Err(bad_request("parameters must be finite"));
    }
    if kind == ScenarioKind::LensRect && p.iter().any(|v| *v <= 0.0) {
        return Err(bad_request("w, h and d must be positive"));
    }
    TargetSpec::from_params(kind, &p).map_err(|e| bad_request(e.to_string()))
}

fn profiles(surface: &SurfaceModel, cone: f64) -> Vec<Profile> {
    [0.0, 45.0, 90.0]
        .into_iter()
        .map(|deg: f64| Profile {
            phi_deg: deg,
            points: radial_profile(surface, deg.to_radians(), cone, PROFILE_SAMPLES).into_iter().map(|(t, r)| [t, r]).collect(),
        })
        .collect()
}

async fn handle_design(
    State(st): State<Arc<AppState>>,
    body: std::result::Result<Json<DesignRequest>, JsonRejection>,
) -> std::result::Result<Json<DesignResponse>, ApiError> {
    let Json(req) = body.map_err(|e| bad_request(e.body_text()))?;
    let kind = ScenarioKind::parse(&req.scenario)
        .map_err(|_| ApiError(StatusCode::NOT_FOUND, format!("unknown scenario {:?}", req.scenario)))?;
    let model = st
        .models
        .get(&kind)
        .ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("no model loaded for {kind}")))?;
    let target = parse_target(kind, &req.params)?;
    let sc = kind.scenario();

    let t0 = Instant::now();
    let surface = infer_design(model, &target).map_err(|e| match e {
        Error::NonPositiveRadius { .. } => ApiError(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()),
        other => bad_request(other.to_string()),
    })?;
    let inference_time_ms = t0.elapsed().as_secs_f64() * 1e3;

    let mut resp = DesignResponse {
        scenario: kind,
        surface: surface.clone(),
        extrapolation: model.extrapolates(&target.params()),
        inference_time_ms,
        nonuniformity_pct: None,
        spill_fraction: None,
        irradiance: None,
        trace_time_ms: None,
        profiles: req.include_profile.then(|| profiles(&surface, sc.cone_half_angle)),
    };

    if let Some(ev) = req.evaluate {
        let rays = ev.rays.unwrap_or(st.max_rays).min(st.max_rays);
        if rays == 0 {
            return Err(bad_request("rays must be positive"));
        }
        let permit = st
            .trace_slots
            .clone()
            .try_acquire_owned()
            .map_err(|_| ApiError(StatusCode::SERVICE_UNAVAILABLE, "trace queue is full".into()))?;
        let t1 = Instant::now();
        let seed = ev.seed;
        let job = tokio::task::spawn_blocking(move || {
            let _permit = permit;
            evaluate_design(&sc, &surface, &target, rays, seed)
        });
        let result = job.await.map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
        let ev_out = result.map_err(|e| ApiError(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))?;
        let m = &ev_out.smoothed;
        let n = m.grid_n;
        let mean = m.values.iter().sum::<f64>() / (n * n) as f64;
        let scale = if mean > 0.0 { 1.0 / mean } else { 0.0 };
        resp.nonuniformity_pct = Some(ev_out.nonuniformity_pct);
        resp.spill_fraction = Some(ev_out.spill_fraction);
        resp.irradiance = Some(Irradiance {
            grid_n: n,
            extent_mm: [m.receiver.center[0], m.receiver.center[1], m.receiver.size[0], m.receiver.size[1]],
            rows: m.values.chunks(n).map(|r| r.iter().map(|v| v * scale).collect()).collect(),
            rays,
            seed,
        });
        resp.trace_time_ms = Some(t1.elapsed().as_secs_f64() * 1e3);
    }
    Ok(Json(resp))
}

/// Loads the configured models and serves until interrupted.
pub fn serve_blocking(cfg: ServiceConfig) -> Result<()> {
    let models = cfg.models.iter().map(load_model).collect::<Result<Vec<_>>>()?;
    let state = Arc::new(AppState::new(models, cfg.max_rays, cfg.trace_workers)?);
    let app = router(state.clone(), cfg.static_dir.clone());
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&cfg.addr).await?;
        eprintln!(
            "listening on http://{} with models: {:?}",
            listener.local_addr()?,
            state.models.keys().map(|k| k.as_str()).collect::<Vec<_>>()
        );
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
    })?;
    Ok(())
}
