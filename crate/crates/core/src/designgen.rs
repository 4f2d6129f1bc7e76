//! Ground-truth design generation.
//!
//! A target is turned into a prescribed ray map (equal source flux to equal
//! target area, via the concentric disk/square map), and the surface
//! coefficients (plus tilt for the reflector) are fitted to that map with
//! Levenberg-Marquardt. That map is not reachable by a smooth surface, so a
//! second fit pushes equal-flux cells toward equal landing areas while the
//! map only anchors them weakly. Each fitted design is then raytraced and
//! scored.

use std::f64::consts::{FRAC_PI_4, PI};

/// Value of the constant harmonic.
const Y00: f64 = 0.282_094_791_773_878_14;

use nalgebra::{DMatrix, DVector, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{self, Damping, LeastSquaresProblem, LmSettings, StopReason};
use crate::optics::{evaluate_design, redirect, RayFate, Receiver, Scenario, ScenarioKind};
use crate::rng::{derive_seed, substream};
use crate::shsurface::{
    direction_angles, eval_sh_basis_into, validate_surface, ShEval, ShIndex,
    SurfaceModel, SurfacePoint,
};

/// Performance parameters of one design, in millimeters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TargetSpec {
    /// 500 mm square at 3 m, centered at `(x, y)`.
    Offset { x: f64, y: f64 },
    /// `w` x `h` rectangle on the axis at distance `d`.
    Rect { w: f64, h: f64, d: f64 },
}

impl TargetSpec {
    pub fn kind(&self) -> ScenarioKind {
        match self {
            TargetSpec::Offset { .. } => ScenarioKind::ReflectorOffset,
            TargetSpec::Rect { .. } => ScenarioKind::LensRect,
        }
    }

    pub fn params(&self) -> Vec<f64> {
        match *self {
            TargetSpec::Offset { x, y } => vec![x, y],
            TargetSpec::Rect { w, h, d } => vec![w, h, d],
        }
    }

    pub fn from_params(kind: ScenarioKind, p: &[f64]) -> Result<Self> {
        match (kind, p) {
            (ScenarioKind::ReflectorOffset, [x, y]) => Ok(TargetSpec::Offset { x: *x, y: *y }),
            (ScenarioKind::LensRect, [w, h, d]) => Ok(TargetSpec::Rect { w: *w, h: *h, d: *d }),
            (ScenarioKind::ReflectorOffset, _) => Err(Error::DimensionMismatch { expected: 2, got: p.len() }),
            (ScenarioKind::LensRect, _) => Err(Error::DimensionMismatch { expected: 3, got: p.len() }),
        }
    }

    pub fn param_names(kind: ScenarioKind) -> &'static [&'static str] {
        match kind {
            ScenarioKind::ReflectorOffset => &["x", "y"],
            ScenarioKind::LensRect => &["w", "h", "d"],
        }
    }
}

/// Training box from the published examples, in millimeters.
pub fn training_box(kind: ScenarioKind) -> Vec<(f64, f64)> {
    match kind {
        ScenarioKind::ReflectorOffset => vec![(0.0, 500.0), (0.0, 500.0)],
        ScenarioKind::LensRect => vec![(2000.0, 4000.0), (2000.0, 4000.0), (1000.0, 1500.0)],
    }
}

/// Concentric square-to-disk map; `[-1, 1]^2` onto the unit disk, area
/// scaled by `pi / 4`.
pub fn square_to_disk(a: f64, b: f64) -> (f64, f64) {
    if a == 0.0 && b == 0.0 {
        return (0.0, 0.0);
    }
    let (r, phi) = if a.abs() > b.abs() {
        (a, FRAC_PI_4 * (b / a))
    } else {
        (b, PI / 2.0 - FRAC_PI_4 * (a / b))
    };
    (r * phi.cos(), r * phi.sin())
}

/// Inverse of [`square_to_disk`].
pub fn disk_to_square(u: f64, v: f64) -> (f64, f64) {
    let r = u.hypot(v);
    if r == 0.0 {
        return (0.0, 0.0);
    }
    if u.abs() >= v.abs() {
        let a = r.copysign(u);
        (a, a * (v / u).atan() / FRAC_PI_4)
    } else {
        let b = r.copysign(v);
        (b * (u / v).atan() / FRAC_PI_4, b)
    }
}

/// Prescribed target point for a source direction.
///
/// Lambertian flux is uniform in `(sin t cos p, sin t sin p)`, so scaling
/// that disk to unit radius and applying the area-preserving disk-to-square
/// map sends equal flux to equal target area.
pub fn target_map(scenario: &Scenario, target: &TargetSpec, direction: &Vector3<f64>) -> Result<[f64; 2]> {
    let rx = scenario.receiver(target)?;
    Ok(target_map_on(scenario, &rx, direction))
}

fn target_map_on(scenario: &Scenario, rx: &Receiver, d: &Vector3<f64>) -> [f64; 2] {
    let smax = scenario.cone_half_angle.sin();
    let (mut u, mut v) = (d.x / smax, d.y / smax);
    let rho = u.hypot(v);
    if rho > 1.0 {
        u /= rho;
        v /= rho;
    }
    let (sx, sy) = disk_to_square(u, v);
    [rx.center[0] + 0.5 * rx.size[0] * sx, rx.center[1] + 0.5 * rx.size[1] * sy]
}

/// Deterministic equal-flux ray grid: cell centers of an `n x n` square
/// grid mapped into the emission cone. Returns `(direction, square coords)`.
pub fn equal_flux_rays(cone_half_angle: f64, n: usize) -> Vec<(Vector3<f64>, [f64; 2])> {
    let smax = cone_half_angle.sin();
    let mut out = Vec::with_capacity(n * n);
    for iy in 0..n {
        for ix in 0..n {
            let sx = (ix as f64 + 0.5) / n as f64 * 2.0 - 1.0;
            let sy = (iy as f64 + 0.5) / n as f64 * 2.0 - 1.0;
            let (u, v) = square_to_disk(sx, sy);
            let (dx, dy) = (u * smax, v * smax);
            let dz = (1.0 - dx * dx - dy * dy).max(0.0).sqrt();
            out.push((Vector3::new(dx, dy, dz), [sx, sy]));
        }
    }
    out
}

/// Sphere of the scenario's base radius with the scenario's mask.
pub fn init_surface(scenario: &Scenario) -> SurfaceModel {
    SurfaceModel::sphere(scenario.order, scenario.mask, scenario.base_radius)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LmOptions {
    pub ray_grid_n: usize,
    pub max_iter: usize,
    pub damping: Damping,
    /// Stop once the RMS ray-landing error drops below this (mm).
    pub rms_tolerance_mm: f64,
    pub tikhonov_weight: f64,
    /// Coefficients with `l` at or above this are regularized.
    pub tikhonov_min_l: usize,
    /// Pulls tilt toward zero; tilt duplicates rotations the full basis can
    /// already express, so this picks the smallest-tilt solution.
    pub tilt_weight: f64,
    /// Holds the mean radius near the base radius. Directions leaving the
    /// surface do not change when it is scaled, so nothing else fixes size.
    pub scale_weight: f64,
    pub fd_step_coeff: f64,
    pub fd_step_tilt: f64,
    /// Iterations of the equal-area refinement after the ray-map fit.
    pub refine_iter: usize,
    /// Weight of the prescribed-map residuals during refinement.
    pub anchor_weight: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self {
            ray_grid_n: 32,
            max_iter: 100,
            damping: Damping::default(),
            rms_tolerance_mm: 0.5,
            tikhonov_weight: 1e-3,
            tikhonov_min_l: 7,
            tilt_weight: 1e-3,
            scale_weight: 1.0,
            fd_step_coeff: 1e-4,
            fd_step_tilt: 1e-5,
            refine_iter: 40,
            anchor_weight: 1e-3,
        }
    }
}

impl LmOptions {
    /// Defaults tuned per scenario. The lens leaves everything outside its
    /// 70 degree cone unconstrained and its equal-area optimum is a flat
    /// valley, so every order is damped and the size is held firmly; this
    /// makes the fitted coefficients vary smoothly with the target.
    pub fn for_scenario(kind: ScenarioKind) -> Self {
        match kind {
            ScenarioKind::ReflectorOffset => Self::default(),
            ScenarioKind::LensRect => {
                Self { tikhonov_weight: 1.0, tikhonov_min_l: 1, scale_weight: 100.0, ..Self::default() }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.ray_grid_n > 0
            && self.damping.lambda_init > 0.0
            && self.damping.lambda_up > 1.0
            && self.damping.lambda_down > 1.0
            && self.damping.lambda_cap > 0.0
            && self.rms_tolerance_mm > 0.0
            && self.tikhonov_weight >= 0.0
            && self.tilt_weight >= 0.0
            && self.scale_weight >= 0.0
            && self.anchor_weight >= 0.0
            && self.fd_step_coeff > 0.0
            && self.fd_step_tilt > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument("LM options must be positive".into()))
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub surface: SurfaceModel,
    /// Accepted plus rejected LM iterations over both stages.
    pub iterations: usize,
    /// RMS distance between landed and prescribed points of the ray map (mm).
    pub map_rms_mm: f64,
    /// RMS residual of the last stage run (mm).
    pub rms_mm: f64,
    pub stop: StopReason,
    pub cost_history: Vec<f64>,
}

/// What the fit residuals measure.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    /// Landing point minus prescribed point, for rays at grid cell centers.
    RayMap,
    /// Equal-flux cells (between rays at grid nodes) must land on equal
    /// areas, boundary nodes on the receiver edge; the prescribed map enters
    /// with `anchor_weight`.
    EqualArea { anchor_weight: f64, extent: f64 },
}

/// Refinement lattices grow toward the cone edge in steps; the ray-map fit
/// leaves the outermost rays badly placed or lost. Refinement starts at
/// `REFINE_EXTENTS[REFINE_START]`, or the largest smaller extent whose rays
/// all land.
const REFINE_EXTENTS: [f64; 7] = [0.7, 0.8, 0.85, 0.9, 0.95, 0.98, 1.0];
const REFINE_START: usize = 4;

/// Landing-point least squares for one target.
pub struct FitProblem {
    scenario: Scenario,
    receiver: Receiver,
    template: SurfaceModel,
    free_idx: Vec<usize>,
    fit_tilt: bool,
    objective: Objective,
    /// Rays per side of the ray lattice.
    side: usize,
    rays: Vec<(Vector3<f64>, [f64; 2])>,
    tikhonov: Vec<usize>,
    tikhonov_sqrt: f64,
    tilt_sqrt: f64,
    /// Parameter slot of `c_{0,0}` and its row weight.
    scale: Option<(usize, f64)>,
    fd_coeff: f64,
    fd_tilt: f64,
}

impl FitProblem {
    pub fn new(
        scenario: &Scenario,
        target: &TargetSpec,
        template: &SurfaceModel,
        opts: &LmOptions,
        fit_tilt: bool,
        objective: Objective,
    ) -> Result<Self> {
        let receiver = scenario.receiver(target)?;
        let n = opts.ray_grid_n;
        let (side, lattice) = match objective {
            Objective::RayMap => (n, equal_flux_rays(scenario.cone_half_angle, n)),
            Objective::EqualArea { extent, .. } => (n + 1, equal_flux_nodes(scenario.cone_half_angle, n, extent)),
        };
        let rays = lattice
            .into_iter()
            .map(|(d, _)| {
                let t = target_map_on(scenario, &receiver, &d);
                (d, t)
            })
            .collect();
        let free_idx = template.coeffs.free_indices();
        let tikhonov = free_idx
            .iter()
            .enumerate()
            .filter(|(_, f)| ShIndex::from_flat(**f).l >= opts.tikhonov_min_l)
            .map(|(p, _)| p)
            .collect();
        let scale = free_idx.iter().position(|f| *f == 0).filter(|_| opts.scale_weight > 0.0).map(|p| (p, opts.scale_weight.sqrt()));
        Ok(Self {
            scenario: scenario.clone(),
            receiver,
            template: template.clone(),
            free_idx,
            fit_tilt,
            objective,
            side,
            rays,
            tikhonov,
            tikhonov_sqrt: opts.tikhonov_weight.sqrt(),
            // tilt rows in mm: radians times the base radius
            tilt_sqrt: opts.tilt_weight.sqrt() * scenario.base_radius,
            scale,
            fd_coeff: opts.fd_step_coeff,
            fd_tilt: opts.fd_step_tilt,
        })
    }

    pub fn n_params(&self) -> usize {
        self.free_idx.len() + if self.fit_tilt { 2 } else { 0 }
    }

    pub fn n_rays(&self) -> usize {
        self.rays.len()
    }

    pub fn params_of(&self, s: &SurfaceModel) -> DVector<f64> {
        let mut v: Vec<f64> = self.free_idx.iter().map(|i| s.coeffs.values[*i]).collect();
        if self.fit_tilt {
            v.push(s.tilt_alpha);
            v.push(s.tilt_beta);
        }
        DVector::from_vec(v)
    }

    pub fn surface_of(&self, x: &DVector<f64>) -> SurfaceModel {
        let mut s = self.template.clone();
        for (p, i) in self.free_idx.iter().enumerate() {
            s.coeffs.values[*i] = x[p];
        }
        if self.fit_tilt {
            let k = self.free_idx.len();
            s.tilt_alpha = x[k];
            s.tilt_beta = x[k + 1];
        }
        s
    }

    /// Landing points of the lattice rays; `None` if any ray is lost.
    pub fn landings(&self, s: &SurfaceModel) -> Option<Vec<[f64; 2]>> {
        let rot = s.rotation();
        let mut basis = ShEval::new(s.order());
        self.rays
            .iter()
            .map(|(d, _)| {
                let (theta, phi) = direction_angles(&(rot.transpose() * d));
                eval_sh_basis_into(theta, phi, &mut basis).ok()?;
                let pt = s.point_from_basis(&basis);
                match redirect(&self.scenario, self.receiver.plane_z, &rot, d, theta, phi, &pt) {
                    RayFate::Hit(x, y) => Some([x, y]),
                    RayFate::Lost => None,
                }
            })
            .collect()
    }

    /// RMS distance between landings and the prescribed map (mm).
    pub fn map_rms(&self, hits: &[[f64; 2]]) -> f64 {
        let sum: f64 = hits
            .iter()
            .zip(&self.rays)
            .map(|(h, (_, t))| (h[0] - t[0]).powi(2) + (h[1] - t[1]).powi(2))
            .sum();
        (sum / hits.len().max(1) as f64).sqrt()
    }

    fn n_geometric(&self) -> usize {
        match self.objective {
            Objective::RayMap => 2 * self.rays.len(),
            Objective::EqualArea { .. } => {
                let cells = (self.side - 1) * (self.side - 1);
                cells + 4 * self.side + 2 * self.rays.len()
            }
        }
    }

    fn n_residuals(&self) -> usize {
        self.n_geometric() + self.tikhonov.len() + usize::from(self.scale.is_some()) + if self.fit_tilt { 2 } else { 0 }
    }

    /// Half-widths of the receiver region the node lattice maps onto.
    fn node_half(&self) -> [f64; 2] {
        let e = match self.objective {
            Objective::EqualArea { extent, .. } => extent,
            Objective::RayMap => 1.0,
        };
        [0.5 * e * self.receiver.size[0], 0.5 * e * self.receiver.size[1]]
    }

    fn cell_area_target(&self) -> f64 {
        let c = (self.side - 1) as f64;
        let h = self.node_half();
        4.0 * h[0] * h[1] / (c * c)
    }

    /// Geometric residuals and their derivative with respect to the landings
    /// (as sparse `(row, landing coordinate, value)` triples).
    fn geometric(&self, hits: &[[f64; 2]], with_grad: bool) -> (Vec<f64>, Vec<(usize, usize, f64)>) {
        let mut r = Vec::with_capacity(self.n_geometric());
        let mut g = Vec::new();
        match self.objective {
            Objective::RayMap => {
                for (i, (h, (_, t))) in hits.iter().zip(&self.rays).enumerate() {
                    r.push(h[0] - t[0]);
                    r.push(h[1] - t[1]);
                    if with_grad {
                        g.push((2 * i, 2 * i, 1.0));
                        g.push((2 * i + 1, 2 * i + 1, 1.0));
                    }
                }
            }
            Objective::EqualArea { anchor_weight, .. } => {
                let m = self.side;
                let node = |i: usize, j: usize| j * m + i;
                let side0 = self.cell_area_target().sqrt();
                for j in 0..m - 1 {
                    for i in 0..m - 1 {
                        let k = [node(i, j), node(i + 1, j), node(i + 1, j + 1), node(i, j + 1)];
                        let [p00, p10, p11, p01] = k.map(|k| hits[k]);
                        let ax = p11[0] - p00[0];
                        let ay = p11[1] - p00[1];
                        let bx = p01[0] - p10[0];
                        let by = p01[1] - p10[1];
                        let area = 0.5 * (ax * by - bx * ay);
                        let root = area.abs().sqrt().copysign(area);
                        let row = r.len();
                        r.push(root - side0);
                        if with_grad {
                            let s = 0.5 / area.abs().sqrt().max(1e-9 * side0);
                            let da = [
                                (k[2], 0, 0.5 * by),
                                (k[0], 0, -0.5 * by),
                                (k[3], 1, 0.5 * ax),
                                (k[1], 1, -0.5 * ax),
                                (k[3], 0, -0.5 * ay),
                                (k[1], 0, 0.5 * ay),
                                (k[2], 1, -0.5 * bx),
                                (k[0], 1, 0.5 * bx),
                            ];
                            for (node, axis, v) in da {
                                g.push((row, 2 * node + axis, s * v));
                            }
                        }
                    }
                }
                let c = self.receiver.center;
                let half = self.node_half();
                let lo = [c[0] - half[0], c[1] - half[1]];
                let hi = [c[0] + half[0], c[1] + half[1]];
                for t in 0..m {
                    let edges = [
                        (node(0, t), 0, lo[0]),
                        (node(m - 1, t), 0, hi[0]),
                        (node(t, 0), 1, lo[1]),
                        (node(t, m - 1), 1, hi[1]),
                    ];
                    for (k, axis, edge) in edges {
                        let row = r.len();
                        r.push(hits[k][axis] - edge);
                        if with_grad {
                            g.push((row, 2 * k + axis, 1.0));
                        }
                    }
                }
                let w = anchor_weight.sqrt();
                for (k, (h, (_, t))) in hits.iter().zip(&self.rays).enumerate() {
                    for axis in 0..2 {
                        let row = r.len();
                        r.push(w * (h[axis] - t[axis]));
                        if with_grad {
                            g.push((row, 2 * k + axis, w));
                        }
                    }
                }
            }
        }
        (r, g)
    }

    /// Central-difference Jacobian of the landings (`2 * rays` x params).
    ///
    /// Coefficient columns reuse the basis at each ray, since a coefficient
    /// step only shifts `r` and its gradient linearly.
    pub fn landing_jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let k = self.rays.len();
        let nc = self.free_idx.len();
        let mut jac = DMatrix::zeros(2 * k, self.n_params());
        let s = self.surface_of(x);
        let rot = s.rotation();
        let mut basis = ShEval::new(s.order());
        let h = self.fd_coeff;
        let plane = self.receiver.plane_z;
        for (i, (d, _)) in self.rays.iter().enumerate() {
            let (theta, phi) = direction_angles(&(rot.transpose() * d));
            eval_sh_basis_into(theta, phi, &mut basis).expect("angles from acos are in range");
            let pt = s.point_from_basis(&basis);
            for (p, f) in self.free_idx.iter().enumerate() {
                let shift = |sign: f64| SurfacePoint {
                    r: pt.r + sign * h * basis.value[*f],
                    dr_dtheta: pt.dr_dtheta + sign * h * basis.d_theta[*f],
                    dr_dphi: pt.dr_dphi + sign * h * basis.d_phi(*f),
                    dr_dphi_over_sin: pt.dr_dphi_over_sin + sign * h * basis.d_phi_over_sin[*f],
                };
                let plus = redirect(&self.scenario, plane, &rot, d, theta, phi, &shift(1.0));
                let minus = redirect(&self.scenario, plane, &rot, d, theta, phi, &shift(-1.0));
                if let (RayFate::Hit(xp, yp), RayFate::Hit(xm, ym)) = (plus, minus) {
                    jac[(2 * i, p)] = (xp - xm) / (2.0 * h);
                    jac[(2 * i + 1, p)] = (yp - ym) / (2.0 * h);
                }
            }
        }
        if self.fit_tilt {
            for t in 0..2 {
                let col = nc + t;
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[col] += self.fd_tilt;
                xm[col] -= self.fd_tilt;
                let lp = self.landings(&self.surface_of(&xp));
                let lm = self.landings(&self.surface_of(&xm));
                if let (Some(lp), Some(lm)) = (lp, lm) {
                    for i in 0..k {
                        jac[(2 * i, col)] = (lp[i][0] - lm[i][0]) / (2.0 * self.fd_tilt);
                        jac[(2 * i + 1, col)] = (lp[i][1] - lm[i][1]) / (2.0 * self.fd_tilt);
                    }
                }
            }
        }
        jac
    }
}

impl LeastSquaresProblem for FitProblem {
    fn residuals(&self, x: &DVector<f64>) -> Option<DVector<f64>> {
        let s = self.surface_of(x);
        if s.tilt_alpha.abs() >= PI / 2.0 || s.tilt_beta.abs() >= PI / 2.0 {
            return None;
        }
        validate_surface(&s, self.scenario.cone_half_angle).ok()?;
        let hits = self.landings(&s)?;
        let (geo, _) = self.geometric(&hits, false);
        let mut r = DVector::zeros(self.n_residuals());
        for (i, v) in geo.iter().enumerate() {
            r[i] = *v;
        }
        let mut row = geo.len();
        for p in &self.tikhonov {
            r[row] = self.tikhonov_sqrt * x[*p];
            row += 1;
        }
        if let Some((p, w)) = self.scale {
            r[row] = w * (x[p] * Y00 - self.scenario.base_radius);
            row += 1;
        }
        if self.fit_tilt {
            let nc = self.free_idx.len();
            r[row] = self.tilt_sqrt * x[nc];
            r[row + 1] = self.tilt_sqrt * x[nc + 1];
        }
        Some(r)
    }

    fn jacobian(&self, x: &DVector<f64>, _r: &DVector<f64>) -> DMatrix<f64> {
        let s = self.surface_of(x);
        let hits = self.landings(&s).expect("jacobian is only taken at feasible points");
        let lj = self.landing_jacobian(x);
        let (geo, grad) = self.geometric(&hits, true);
        let np = self.n_params();
        let mut jac = DMatrix::zeros(self.n_residuals(), np);
        for (row, coord, v) in grad {
            for p in 0..np {
                jac[(row, p)] += v * lj[(coord, p)];
            }
        }
        let mut row = geo.len();
        for p in &self.tikhonov {
            jac[(row, *p)] = self.tikhonov_sqrt;
            row += 1;
        }
        if let Some((p, w)) = self.scale {
            jac[(row, p)] = w * Y00;
            row += 1;
        }
        if self.fit_tilt {
            let nc = self.free_idx.len();
            jac[(row, nc)] = self.tilt_sqrt;
            jac[(row + 1, nc + 1)] = self.tilt_sqrt;
        }
        jac
    }

    fn error_measure(&self, r: &DVector<f64>) -> f64 {
        let n = self.n_geometric();
        let count = match self.objective {
            Objective::RayMap => self.rays.len(),
            Objective::EqualArea { .. } => n,
        };
        (r.rows(0, n).norm_squared() / count as f64).sqrt()
    }
}

/// Equal-flux lattice at cell corners: `(n+1)^2` rays bounding `n^2` cells
/// of equal source flux.
/// The lattice spans `[-extent, extent]^2` in square coordinates.
pub fn equal_flux_nodes(cone_half_angle: f64, n: usize, extent: f64) -> Vec<(Vector3<f64>, [f64; 2])> {
    let smax = cone_half_angle.sin();
    let mut out = Vec::with_capacity((n + 1) * (n + 1));
    for iy in 0..=n {
        for ix in 0..=n {
            let sx = (ix as f64 / n as f64 * 2.0 - 1.0) * extent;
            let sy = (iy as f64 / n as f64 * 2.0 - 1.0) * extent;
            let (u, v) = square_to_disk(sx, sy);
            let (dx, dy) = (u * smax, v * smax);
            let dz = (1.0 - dx * dx - dy * dy).max(0.0).sqrt();
            out.push((Vector3::new(dx, dy, dz), [sx, sy]));
        }
    }
    out
}

/// Fits surface coefficients (and tilt) to the equal-flux ray map, then
/// refines toward equal landing areas. Returns the best iterate.
pub fn fit_surface(
    scenario: &Scenario,
    target: &TargetSpec,
    init: &SurfaceModel,
    opts: &LmOptions,
    fit_tilt: bool,
) -> Result<FitOutcome> {
    opts.validate()?;
    validate_surface(init, scenario.cone_half_angle)?;
    if fit_tilt && scenario.kind != ScenarioKind::ReflectorOffset {
        return Err(Error::InvalidArgument("tilt is only fitted for the reflector".into()));
    }
    let mapping = FitProblem::new(scenario, target, init, opts, fit_tilt, Objective::RayMap)?;
    let x0 = mapping.params_of(init);
    if mapping.residuals(&x0).is_none() {
        return Err(Error::InvalidArgument("initial surface loses fit rays".into()));
    }
    let settings = LmSettings { max_iter: opts.max_iter, damping: opts.damping, tolerance: opts.rms_tolerance_mm };
    let rep = lm::minimize(&mapping, x0, &settings)?;
    if rep.stop == StopReason::LambdaCap && rep.iterations <= 1 && rep.error_measure >= opts.rms_tolerance_mm {
        return Err(Error::Divergence(format!(
            "no descent step from the initial surface (rms {:.3} mm)",
            rep.error_measure
        )));
    }
    let mut surface = mapping.surface_of(&rep.x);
    let mut iterations = rep.iterations;
    let mut rms_mm = rep.error_measure;
    let mut stop = rep.stop;
    let mut cost_history = rep.cost_history;
    if opts.refine_iter > 0 && rep.stop != StopReason::Converged && opts.max_iter > 0 {
        let refine_at = |extent: f64, surface: &SurfaceModel| {
            let objective = Objective::EqualArea { anchor_weight: opts.anchor_weight, extent };
            FitProblem::new(scenario, target, surface, opts, fit_tilt, objective)
        };
        let mut start = None;
        for i in (0..=REFINE_START).rev() {
            let p = refine_at(REFINE_EXTENTS[i], &surface)?;
            if p.residuals(&p.params_of(&surface)).is_some() {
                start = Some(i);
                break;
            }
        }
        for extent in start.map_or(&[][..], |i| &REFINE_EXTENTS[i..]) {
            let refine = refine_at(*extent, &surface)?;
            let x1 = refine.params_of(&surface);
            if refine.residuals(&x1).is_none() {
                continue;
            }
            let settings = LmSettings { max_iter: opts.refine_iter, damping: opts.damping, tolerance: 0.0 };
            let rr = lm::minimize(&refine, x1, &settings)?;
            surface = refine.surface_of(&rr.x);
            iterations += rr.iterations;
            rms_mm = rr.error_measure;
            stop = rr.stop;
            cost_history.extend(rr.cost_history);
        }
    }
    let map_rms_mm = mapping.landings(&surface).map(|h| mapping.map_rms(&h)).unwrap_or(f64::INFINITY);
    Ok(FitOutcome { surface, iterations, map_rms_mm, rms_mm, stop, cost_history })
}

/// How targets are drawn for a database.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingPlan {
    /// Uniform random targets inside per-parameter ranges.
    UniformRandom { n: usize, ranges: Vec<(f64, f64)> },
    /// Inclusive lattice with `counts[i]` points along parameter `i`.
    Grid { counts: Vec<usize>, ranges: Vec<(f64, f64)> },
}

impl SamplingPlan {
    pub fn random(kind: ScenarioKind, n: usize) -> Self {
        SamplingPlan::UniformRandom { n, ranges: training_box(kind) }
    }

    pub fn grid(kind: ScenarioKind, counts: Vec<usize>) -> Self {
        SamplingPlan::Grid { counts, ranges: training_box(kind) }
    }

    pub fn targets(&self, kind: ScenarioKind, seed: u64) -> Result<Vec<TargetSpec>> {
        let dim = training_box(kind).len();
        match self {
            SamplingPlan::UniformRandom { n, ranges } => {
                check_ranges(ranges, dim)?;
                let mut rng = substream(seed, 0);
                (0..*n)
                    .map(|_| {
                        let p: Vec<f64> = ranges.iter().map(|(lo, hi)| lo + (hi - lo) * rng.random::<f64>()).collect();
                        TargetSpec::from_params(kind, &p)
                    })
                    .collect()
            }
            SamplingPlan::Grid { counts, ranges } => {
                check_ranges(ranges, dim)?;
                if counts.len() != dim {
                    return Err(Error::DimensionMismatch { expected: dim, got: counts.len() });
                }
                if counts.iter().any(|c| *c == 0) {
                    return Ok(Vec::new());
                }
                let axes: Vec<Vec<f64>> = counts.iter().zip(ranges).map(|(c, r)| linspace(*r, *c)).collect();
                let total: usize = counts.iter().product();
                (0..total)
                    .map(|mut i| {
                        // last parameter varies slowest
                        let mut p = vec![0.0; dim];
                        for (a, axis) in axes.iter().enumerate() {
                            p[a] = axis[i % axis.len()];
                            i /= axis.len();
                        }
                        TargetSpec::from_params(kind, &p)
                    })
                    .collect()
            }
        }
    }
}

fn check_ranges(ranges: &[(f64, f64)], dim: usize) -> Result<()> {
    if ranges.len() != dim {
        return Err(Error::DimensionMismatch { expected: dim, got: ranges.len() });
    }
    if ranges.iter().any(|(lo, hi)| !(lo <= hi) || !lo.is_finite() || !hi.is_finite()) {
        return Err(Error::InvalidArgument("parameter ranges must satisfy lo <= hi".into()));
    }
    Ok(())
}

/// Inclusive evenly spaced points; a single point sits at the midpoint.
pub fn linspace((lo, hi): (f64, f64), n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.5 * (lo + hi)],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordMeta {
    pub index: usize,
    pub iters: usize,
    pub rms_mm: f64,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warm_start: Option<usize>,
}

/// One line of the design database.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignRecord {
    pub scenario: ScenarioKind,
    pub target: TargetSpec,
    pub surface: SurfaceModel,
    pub nonuniformity_pct: f64,
    pub spill: f64,
    pub meta: RecordMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureMeta {
    pub index: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedRecord {
    pub scenario: ScenarioKind,
    pub target: TargetSpec,
    pub error: String,
    pub meta: FailureMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DbEntry {
    Design(DesignRecord),
    Failed(FailedRecord),
}

impl DbEntry {
    pub fn index(&self) -> usize {
        match self {
            DbEntry::Design(r) => r.meta.index,
            DbEntry::Failed(f) => f.meta.index,
        }
    }

    pub fn scenario(&self) -> ScenarioKind {
        match self {
            DbEntry::Design(r) => r.scenario,
            DbEntry::Failed(f) => f.scenario,
        }
    }

    pub fn design(&self) -> Option<&DesignRecord> {
        match self {
            DbEntry::Design(r) => Some(r),
            DbEntry::Failed(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatabaseOptions {
    pub lm: LmOptions,
    pub eval_rays: usize,
    /// Targets fitted concurrently; warm starts only come from earlier batches,
    /// so results do not depend on the thread count.
    pub batch_size: usize,
    pub warm_start: bool,
}

impl DatabaseOptions {
    pub fn for_scenario(kind: ScenarioKind) -> Self {
        Self { lm: LmOptions::for_scenario(kind), ..Self::default() }
    }
}

impl Default for DatabaseOptions {
    fn default() -> Self {
        Self { lm: LmOptions::default(), eval_rays: crate::optics::DEFAULT_RAYS, batch_size: 8, warm_start: true }
    }
}

/// Fits, traces and scores a single target.
pub fn design_target(
    scenario: &Scenario,
    target: &TargetSpec,
    init: &SurfaceModel,
    opts: &DatabaseOptions,
    index: usize,
    seed: u64,
    warm_start: Option<usize>,
) -> DbEntry {
    let trace_seed = derive_seed(seed, index as u64);
    let fit_tilt = scenario.kind == ScenarioKind::ReflectorOffset;
    let result = fit_surface(scenario, target, init, &opts.lm, fit_tilt).and_then(|fit| {
        let ev = evaluate_design(scenario, &fit.surface, target, opts.eval_rays, trace_seed)?;
        Ok(DesignRecord {
            scenario: scenario.kind,
            target: *target,
            surface: fit.surface,
            nonuniformity_pct: ev.nonuniformity_pct,
            spill: ev.spill_fraction,
            meta: RecordMeta { index, iters: fit.iterations, rms_mm: fit.rms_mm, seed: trace_seed, warm_start },
        })
    });
    match result {
        Ok(r) => DbEntry::Design(r),
        Err(e) => DbEntry::Failed(FailedRecord {
            scenario: scenario.kind,
            target: *target,
            error: e.to_string(),
            meta: FailureMeta { index, seed: trace_seed },
        }),
    }
}

fn starts_cleanly(scenario: &Scenario, target: &TargetSpec, surface: &SurfaceModel, opts: &LmOptions) -> bool {
    let fit_tilt = scenario.kind == ScenarioKind::ReflectorOffset;
    FitProblem::new(scenario, target, surface, opts, fit_tilt, Objective::RayMap)
        .map(|p| p.residuals(&p.params_of(surface)).is_some())
        .unwrap_or(false)
}

fn nearest_design<'a>(done: &'a [DbEntry], target: &TargetSpec, scales: &[f64]) -> Option<&'a DesignRecord> {
    let p = target.params();
    done.iter()
        .filter_map(DbEntry::design)
        .map(|r| {
            let q = r.target.params();
            let d2: f64 = p.iter().zip(&q).zip(scales).map(|((a, b), s)| ((a - b) / s).powi(2)).sum();
            (d2, r)
        })
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.meta.index.cmp(&b.1.meta.index)))
        .map(|(_, r)| r)
}

/// Builds the database for a sampling plan.
///
/// `existing` holds entries from an interrupted run (indices already done
/// are skipped), `sink` sees each new entry in plan order as its batch
/// completes.
pub fn generate_database(
    scenario: &Scenario,
    plan: &SamplingPlan,
    seed: u64,
    opts: &DatabaseOptions,
    existing: &[DbEntry],
    mut sink: impl FnMut(&DbEntry) -> Result<()>,
) -> Result<Vec<DbEntry>> {
    let targets = plan.targets(scenario.kind, seed)?;
    let scales: Vec<f64> = training_box(scenario.kind).iter().map(|(lo, hi)| (hi - lo).max(1.0)).collect();
    let mut done: Vec<DbEntry> = existing.to_vec();
    let base = init_surface(scenario);
    let size = opts.batch_size.max(1);
    // batches are fixed by index, so a resumed run sees the same warm starts
    for start in (0..targets.len()).step_by(size) {
        let batch: Vec<usize> =
            (start..(start + size).min(targets.len())).filter(|i| !existing.iter().any(|e| e.index() == *i)).collect();
        if batch.is_empty() {
            continue;
        }
        let earlier: Vec<DbEntry> = done.iter().filter(|e| e.index() < start).cloned().collect();
        let jobs: Vec<(usize, SurfaceModel, Option<usize>)> = batch
            .iter()
            .map(|&i| {
                let warm = if opts.warm_start { nearest_design(&earlier, &targets[i], &scales) } else { None };
                // a neighbor's design can lose rays aimed at this target
                let warm = warm.filter(|r| starts_cleanly(scenario, &targets[i], &r.surface, &opts.lm));
                match warm {
                    Some(r) => (i, r.surface.clone(), Some(r.meta.index)),
                    None => (i, base.clone(), None),
                }
            })
            .collect();
        let run = |(i, init, warm): &(usize, SurfaceModel, Option<usize>)| {
            design_target(scenario, &targets[*i], init, opts, *i, seed, *warm)
        };
        #[cfg(feature = "parallel")]
        let out: Vec<DbEntry> = {
            use rayon::prelude::*;
            jobs.par_iter().map(run).collect()
        };
        #[cfg(not(feature = "parallel"))]
        let out: Vec<DbEntry> = jobs.iter().map(run).collect();
        for e in out {
            sink(&e)?;
            done.push(e);
        }
    }
    done.sort_by_key(DbEntry::index);
    Ok(done)
}

/// Reads a JSON Lines database, skipping blank lines.
pub fn read_database<R: std::io::BufRead>(r: R) -> Result<Vec<DbEntry>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let e: DbEntry = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("database line {}: {e}", n + 1)))?;
        out.push(e);
    }
    Ok(out)
}

pub fn write_entry<W: std::io::Write>(e: &DbEntry, mut w: W) -> Result<()> {
    serde_json::to_writer(&mut w, e)?;
    w.write_all(b"\n")?;
    Ok(())
}

/// Summary line material for a database run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DbSummary {
    pub total: usize,
    pub succeeded: usize,
    pub mean_nonuniformity: f64,
    pub max_nonuniformity: f64,
}

pub fn summarize(entries: &[DbEntry]) -> DbSummary {
    let vals: Vec<f64> = entries.iter().filter_map(DbEntry::design).map(|r| r.nonuniformity_pct).collect();
    let mean = if vals.is_empty() { 0.0 } else { vals.iter().sum::<f64>() / vals.len() as f64 };
    DbSummary {
        total: entries.len(),
        succeeded: vals.len(),
        mean_nonuniformity: mean,
        max_nonuniformity: vals.iter().cloned().fold(0.0, f64::max),
    }
}
