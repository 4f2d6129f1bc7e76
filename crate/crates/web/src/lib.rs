//! In-browser explorer: runs a trained surrogate, previews the surface and
//! raytraces it, all client side.
//!
//! Exported to JavaScript as [`Explorer`] plus [`sh_basis_image`]. Results
//! cross the boundary as JSON strings for the page to `JSON.parse`.

use lumenforge::designgen::{training_box, TargetSpec};
use lumenforge::optics::{evaluate_design, ScenarioKind};
use lumenforge::shsurface::{eval_sh_basis, radial_profile, ShIndex};
use lumenforge::surrogate::{infer_design, read_model, MlpModel};
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Ray budget accepted by [`Explorer::evaluate`]; tracing is single threaded here.
pub const MAX_BROWSER_RAYS: usize = 400_000;

#[derive(Serialize)]
struct Profile {
    phi_deg: f64,
    theta: Vec<f64>,
    r: Vec<f64>,
}

#[derive(Serialize)]
struct Design {
    coeffs: Vec<f64>,
    tilt: [f64; 2],
    extrapolation: bool,
    profiles: Vec<Profile>,
}

#[derive(Serialize)]
struct Trace {
    nonuniformity_pct: f64,
    spill_fraction: f64,
    grid_n: usize,
    /// `[x_center, y_center, width, height]` in mm.
    extent_mm: [f64; 4],
    /// Row-major smoothed map, row 0 at minimum y, mean 1.
    values: Vec<f64>,
}

#[wasm_bindgen]
pub struct Explorer {
    model: MlpModel,
    kind: ScenarioKind,
}

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

impl Explorer {
    pub fn from_json(text: &str) -> lumenforge::Result<Explorer> {
        let model = read_model(text.as_bytes())?;
        let kind = model
            .scenario
            .ok_or_else(|| lumenforge::Error::Format("model has no scenario tag".into()))?;
        Ok(Explorer { model, kind })
    }

    fn target(&self, params: &[f64]) -> lumenforge::Result<TargetSpec> {
        TargetSpec::from_params(self.kind, params)
    }

    pub fn design_json(&self, params: &[f64]) -> lumenforge::Result<String> {
        let target = self.target(params)?;
        let surface = infer_design(&self.model, &target)?;
        let cone = self.kind.scenario().cone_half_angle;
        let profiles = [0.0f64, 45.0, 90.0]
            .into_iter()
            .map(|deg| {
                let pts = radial_profile(&surface, deg.to_radians(), cone, 64);
                Profile { phi_deg: deg, theta: pts.iter().map(|p| p.0).collect(), r: pts.iter().map(|p| p.1).collect() }
            })
            .collect();
        let d = Design {
            coeffs: surface.coeffs.free(),
            tilt: [surface.tilt_alpha, surface.tilt_beta],
            extrapolation: self.model.extrapolates(params),
            profiles,
        };
        Ok(serde_json::to_string(&d)?)
    }

    pub fn trace_json(&self, params: &[f64], rays: usize, seed: u64) -> lumenforge::Result<String> {
        let target = self.target(params)?;
        let surface = infer_design(&self.model, &target)?;
        let sc = self.kind.scenario();
        let ev = evaluate_design(&sc, &surface, &target, rays.clamp(1, MAX_BROWSER_RAYS), seed)?;
        let m = &ev.smoothed;
        let mean = m.values.iter().sum::<f64>() / m.values.len() as f64;
        let scale = if mean > 0.0 { 1.0 / mean } else { 0.0 };
        let t = Trace {
            nonuniformity_pct: ev.nonuniformity_pct,
            spill_fraction: ev.spill_fraction,
            grid_n: m.grid_n,
            extent_mm: [m.receiver.center[0], m.receiver.center[1], m.receiver.size[0], m.receiver.size[1]],
            values: m.values.iter().map(|v| v * scale).collect(),
        };
        Ok(serde_json::to_string(&t)?)
    }
}

#[wasm_bindgen]
impl Explorer {
    #[wasm_bindgen(constructor)]
    pub fn new(model_json: &str) -> Result<Explorer, JsError> {
        Explorer::from_json(model_json).map_err(js_err)
    }

    pub fn scenario(&self) -> String {
        self.kind.as_str().to_string()
    }

    #[wasm_bindgen(js_name = paramNames)]
    pub fn param_names(&self) -> Vec<String> {
        TargetSpec::param_names(self.kind).iter().map(|s| s.to_string()).collect()
    }

    /// `[lo0, hi0, lo1, hi1, ...]`
    #[wasm_bindgen(js_name = trainingBox)]
    pub fn training_box(&self) -> Vec<f64> {
        training_box(self.kind).into_iter().flat_map(|(lo, hi)| [lo, hi]).collect()
    }

    /// Inferred surface with radial profiles at 0, 45 and 90 degrees.
    pub fn design(&self, params: &[f64]) -> Result<String, JsError> {
        self.design_json(params).map_err(js_err)
    }

    /// Raytraces the inferred surface and returns the smoothed map and metric.
    pub fn evaluate(&self, params: &[f64], rays: u32, seed: u32) -> Result<String, JsError> {
        self.trace_json(params, rays as usize, seed as u64).map_err(js_err)
    }
}

/// Real harmonic `Y_lm` on a `height x 2*height` equirectangular grid
/// (theta down the rows, phi across), row-major.
pub fn basis_image(l: usize, m: i32, height: usize) -> lumenforge::Result<Vec<f64>> {
    if m.unsigned_abs() as usize > l || height == 0 {
        return Err(lumenforge::Error::InvalidArgument("need |m| <= l and a positive height".into()));
    }
    let flat = ShIndex::new(l, m).flat();
    let w = 2 * height;
    let mut out = Vec::with_capacity(w * height);
    for row in 0..height {
        let theta = std::f64::consts::PI * (row as f64 + 0.5) / height as f64;
        for col in 0..w {
            let phi = 2.0 * std::f64::consts::PI * (col as f64 + 0.5) / w as f64;
            out.push(eval_sh_basis(l, theta, phi)?[flat]);
        }
    }
    Ok(out)
}

#[wasm_bindgen]
pub fn sh_basis_image(l: u32, m: i32, height: u32) -> Result<Vec<f64>, JsError> {
    basis_image(l as usize, m, height as usize).map_err(js_err)
}
