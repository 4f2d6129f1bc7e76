//! Real spherical harmonics and the radial freeform surfaces built on them.
//!
//! Basis functions use the real orthonormal convention without the
//! Condon-Shortley phase: `m > 0` carries `sqrt(2) cos(m phi)`, `m < 0`
//! carries `sqrt(2) sin(|m| phi)`. Coefficients are stored densely in
//! flat order `l*l + l + m`.
//!
//! A [`SurfaceModel`] describes a surface `r(theta, phi)` around a point
//! source at the origin. The surface lives in a tilted frame: a world
//! direction `d` is looked up at the angles of `R^T d`, with
//! `R = R_y(beta) * R_x(alpha)`.

use std::f64::consts::{PI, SQRT_2};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Harmonic order used by both design scenarios.
pub const DEFAULT_ORDER: usize = 10;

/// Below this polar angle the spherical frame is treated as the pole.
const POLE_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ShIndex {
    pub l: usize,
    pub m: i32,
}

impl ShIndex {
    pub fn new(l: usize, m: i32) -> Self {
        assert!(m.unsigned_abs() as usize <= l, "|m| > l");
        Self { l, m }
    }

    /// Position in the dense coefficient vector.
    pub fn flat(self) -> usize {
        ((self.l * self.l + self.l) as i64 + self.m as i64) as usize
    }

    pub fn from_flat(i: usize) -> Self {
        let l = (i as f64).sqrt() as usize;
        // guard against sqrt rounding for perfect squares
        let l = if (l + 1) * (l + 1) <= i { l + 1 } else { l };
        let m = i as i64 - (l * l + l) as i64;
        Self { l, m: m as i32 }
    }
}

pub fn basis_len(order: usize) -> usize {
    (order + 1) * (order + 1)
}

/// Number of terms kept by [`quadrant_mask`].
pub fn quadrant_len(order: usize) -> usize {
    (0..=order).map(|l| l / 2 + 1).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    Full,
    Quadrant,
}

impl MaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MaskKind::Full => "full",
            MaskKind::Quadrant => "quadrant",
        }
    }

    pub fn free_len(self, order: usize) -> usize {
        match self {
            MaskKind::Full => basis_len(order),
            MaskKind::Quadrant => quadrant_len(order),
        }
    }
}

/// Coefficient subset invariant under `x -> -x` and `y -> -y`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SymmetryMask {
    pub order: usize,
    pub indices: Vec<ShIndex>,
}

pub fn quadrant_mask(order: usize) -> SymmetryMask {
    let indices = (0..=order)
        .flat_map(|l| (0..=l as i32).step_by(2).map(move |m| ShIndex { l, m }))
        .collect();
    SymmetryMask { order, indices }
}

impl SymmetryMask {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, idx: ShIndex) -> bool {
        idx.m >= 0 && idx.m % 2 == 0 && idx.l <= self.order
    }

    /// Full vector to masked vector.
    pub fn pack(&self, full: &[f64]) -> Vec<f64> {
        assert_eq!(full.len(), basis_len(self.order));
        self.indices.iter().map(|i| full[i.flat()]).collect()
    }

    /// Masked vector to full vector, zero outside the mask.
    pub fn unpack(&self, masked: &[f64]) -> Vec<f64> {
        assert_eq!(masked.len(), self.len());
        let mut full = vec![0.0; basis_len(self.order)];
        for (i, v) in self.indices.iter().zip(masked) {
            full[i.flat()] = *v;
        }
        full
    }
}

/// Basis values plus angular derivatives at one direction.
///
/// `d_phi_over_sin` holds `(dY/dphi) / sin(theta)`, which stays finite at the
/// poles and is what the surface normal actually needs.
#[derive(Debug, Clone)]
pub struct ShEval {
    pub order: usize,
    pub value: Vec<f64>,
    pub d_theta: Vec<f64>,
    pub d_phi_over_sin: Vec<f64>,
    pub sin_theta: f64,
    // scratch: normalized Legendre q[l][m] and q[l][m] / sin(theta), row stride order + 2
    q: Vec<f64>,
    p: Vec<f64>,
    cos_m: Vec<f64>,
    sin_m: Vec<f64>,
}

impl ShEval {
    pub fn new(order: usize) -> Self {
        let n = basis_len(order);
        let stride = order + 2;
        Self {
            order,
            value: vec![0.0; n],
            d_theta: vec![0.0; n],
            d_phi_over_sin: vec![0.0; n],
            sin_theta: 0.0,
            q: vec![0.0; stride * stride],
            p: vec![0.0; stride * stride],
            cos_m: vec![0.0; order + 1],
            sin_m: vec![0.0; order + 1],
        }
    }

    pub fn d_phi(&self, i: usize) -> f64 {
        self.d_phi_over_sin[i] * self.sin_theta
    }
}

fn check_theta(theta: f64) -> Result<()> {
    if !(0.0..=PI).contains(&theta) {
        return Err(Error::Domain(theta));
    }
    Ok(())
}

/// All `(L+1)^2` real orthonormal harmonics at `(theta, phi)`.
pub fn eval_sh_basis(order: usize, theta: f64, phi: f64) -> Result<Vec<f64>> {
    let mut out = ShEval::new(order);
    eval_sh_basis_into(theta, phi, &mut out)?;
    Ok(out.value)
}

/// Fills `out` with values and derivatives without allocating.
pub fn eval_sh_basis_into(theta: f64, phi: f64, out: &mut ShEval) -> Result<()> {
    check_theta(theta)?;
    let order = out.order;
    let stride = order + 2;
    let (s, x) = theta.sin_cos();
    let s = s.max(0.0);
    out.sin_theta = s;

    let q = &mut out.q;
    let p = &mut out.p;
    q.iter_mut().for_each(|v| *v = 0.0);
    p.iter_mut().for_each(|v| *v = 0.0);

    // Diagonal q_mm = sqrt((2m+1)/2m) s q_{m-1,m-1}; p = q / s is seeded
    // without the leading factor of s so it stays regular at the poles.
    let q00 = 0.5 / PI.sqrt();
    q[0] = q00;
    for m in 1..=order {
        let f = ((2 * m + 1) as f64 / (2 * m) as f64).sqrt();
        let prev = (m - 1) * stride + (m - 1);
        q[m * stride + m] = f * s * q[prev];
        p[m * stride + m] = if m == 1 { f * q00 } else { f * s * p[prev] };
    }
    for m in 0..order {
        let f = ((2 * m + 3) as f64).sqrt();
        q[(m + 1) * stride + m] = f * x * q[m * stride + m];
        p[(m + 1) * stride + m] = f * x * p[m * stride + m];
        let mf = m as f64;
        for l in m + 2..=order {
            let lf = l as f64;
            let a = ((4.0 * lf * lf - 1.0) / (lf * lf - mf * mf)).sqrt();
            let b = (((lf - 1.0) * (lf - 1.0) - mf * mf) / (4.0 * (lf - 1.0) * (lf - 1.0) - 1.0)).sqrt();
            let (i, i1, i2) = (l * stride + m, (l - 1) * stride + m, (l - 2) * stride + m);
            q[i] = a * (x * q[i1] - b * q[i2]);
            p[i] = a * (x * p[i1] - b * p[i2]);
        }
    }

    let (s1, c1) = phi.sin_cos();
    let (cm, sm) = (&mut out.cos_m, &mut out.sin_m);
    cm[0] = 1.0;
    sm[0] = 0.0;
    for m in 1..=order {
        cm[m] = cm[m - 1] * c1 - sm[m - 1] * s1;
        sm[m] = sm[m - 1] * c1 + cm[m - 1] * s1;
    }

    for l in 0..=order {
        let lf = l as f64;
        let base = l * l + l;
        let row = l * stride;
        out.value[base] = q[row];
        out.d_theta[base] = if l > 0 { -(lf * (lf + 1.0)).sqrt() * q[row + 1] } else { 0.0 };
        out.d_phi_over_sin[base] = 0.0;
        for m in 1..=l {
            let mf = m as f64;
            let dq = 0.5
                * (((lf + mf) * (lf - mf + 1.0)).sqrt() * q[row + m - 1]
                    - ((lf + mf + 1.0) * (lf - mf)).sqrt() * q[row + m + 1]);
            let (c, sn) = (cm[m], sm[m]);
            let qm = SQRT_2 * q[row + m];
            let pm = SQRT_2 * mf * p[row + m];
            out.value[base + m] = qm * c;
            out.d_theta[base + m] = SQRT_2 * dq * c;
            out.d_phi_over_sin[base + m] = -pm * sn;
            out.value[base - m] = qm * sn;
            out.d_theta[base - m] = SQRT_2 * dq * sn;
            out.d_phi_over_sin[base - m] = pm * c;
        }
    }
    Ok(())
}

/// Dense SH coefficients. Values are always full length; a quadrant mask
/// only constrains which entries may be nonzero.
#[derive(Debug, Clone, PartialEq)]
pub struct ShCoefficients {
    pub order: usize,
    pub values: Vec<f64>,
    pub mask: MaskKind,
}

impl ShCoefficients {
    pub fn zeros(order: usize, mask: MaskKind) -> Self {
        Self { order, values: vec![0.0; basis_len(order)], mask }
    }

    pub fn from_full(order: usize, mask: MaskKind, values: Vec<f64>) -> Result<Self> {
        if values.len() != basis_len(order) {
            return Err(Error::DimensionMismatch { expected: basis_len(order), got: values.len() });
        }
        let c = Self { order, values, mask };
        if mask == MaskKind::Quadrant {
            let qm = quadrant_mask(order);
            for (i, v) in c.values.iter().enumerate() {
                if *v != 0.0 && !qm.contains(ShIndex::from_flat(i)) {
                    return Err(Error::InvalidArgument(format!(
                        "coefficient {i} is outside the quadrant mask"
                    )));
                }
            }
        }
        Ok(c)
    }

    /// Builds from the free (possibly masked) parameter vector.
    pub fn from_free(order: usize, mask: MaskKind, free: &[f64]) -> Result<Self> {
        match mask {
            MaskKind::Full => Self::from_full(order, mask, free.to_vec()),
            MaskKind::Quadrant => {
                let qm = quadrant_mask(order);
                if free.len() != qm.len() {
                    return Err(Error::DimensionMismatch { expected: qm.len(), got: free.len() });
                }
                Ok(Self { order, values: qm.unpack(free), mask })
            }
        }
    }

    /// Free parameters in storage order (masked order for quadrant).
    pub fn free(&self) -> Vec<f64> {
        match self.mask {
            MaskKind::Full => self.values.clone(),
            MaskKind::Quadrant => quadrant_mask(self.order).pack(&self.values),
        }
    }

    /// Flat indices of the free parameters.
    pub fn free_indices(&self) -> Vec<usize> {
        match self.mask {
            MaskKind::Full => (0..self.values.len()).collect(),
            MaskKind::Quadrant => quadrant_mask(self.order).indices.iter().map(|i| i.flat()).collect(),
        }
    }

    pub fn get(&self, idx: ShIndex) -> f64 {
        self.values[idx.flat()]
    }
}

/// Radial value and first angular derivatives of a surface.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfacePoint {
    pub r: f64,
    pub dr_dtheta: f64,
    pub dr_dphi: f64,
    /// `dr_dphi / sin(theta)`, finite at the pole.
    pub dr_dphi_over_sin: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceModel {
    pub coeffs: ShCoefficients,
    pub tilt_alpha: f64,
    pub tilt_beta: f64,
}

/// Rotation `R_y(beta) * R_x(alpha)`.
pub fn tilt_matrix(alpha: f64, beta: f64) -> Matrix3<f64> {
    let (sa, ca) = alpha.sin_cos();
    let (sb, cb) = beta.sin_cos();
    let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, ca, -sa, 0.0, sa, ca);
    let ry = Matrix3::new(cb, 0.0, sb, 0.0, 1.0, 0.0, -sb, 0.0, cb);
    ry * rx
}

/// Rotates `d` by the tilt, or by its transpose when `inverse`.
pub fn apply_tilt(d: &Vector3<f64>, alpha: f64, beta: f64, inverse: bool) -> Vector3<f64> {
    let r = tilt_matrix(alpha, beta);
    if inverse {
        r.transpose() * d
    } else {
        r * d
    }
}

/// Polar and azimuthal angle of a unit vector.
pub fn direction_angles(d: &Vector3<f64>) -> (f64, f64) {
    let theta = d.z.clamp(-1.0, 1.0).acos();
    let phi = d.y.atan2(d.x);
    (theta, phi)
}

pub fn direction_from_angles(theta: f64, phi: f64) -> Vector3<f64> {
    let (st, ct) = theta.sin_cos();
    let (sp, cp) = phi.sin_cos();
    Vector3::new(st * cp, st * sp, ct)
}

/// Intersection of a ray from the origin with the surface, in world coordinates.
#[derive(Debug, Clone, Copy)]
pub struct SurfaceHit {
    pub point: Vector3<f64>,
    /// Outward unit normal (pointing away from the source side).
    pub normal: Vector3<f64>,
}

impl SurfaceModel {
    pub fn new(coeffs: ShCoefficients, tilt_alpha: f64, tilt_beta: f64) -> Self {
        Self { coeffs, tilt_alpha, tilt_beta }
    }

    /// Sphere of the given radius, zero tilt.
    pub fn sphere(order: usize, mask: MaskKind, radius: f64) -> Self {
        let mut coeffs = ShCoefficients::zeros(order, mask);
        coeffs.values[0] = radius * 2.0 * PI.sqrt();
        Self::new(coeffs, 0.0, 0.0)
    }

    pub fn order(&self) -> usize {
        self.coeffs.order
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        tilt_matrix(self.tilt_alpha, self.tilt_beta)
    }

    /// Converts precomputed basis values at a direction into a surface point.
    pub fn point_from_basis(&self, basis: &ShEval) -> SurfacePoint {
        let mut r = 0.0;
        let mut rt = 0.0;
        let mut rp = 0.0;
        for (i, c) in self.coeffs.values.iter().enumerate() {
            if *c == 0.0 {
                continue;
            }
            r += c * basis.value[i];
            rt += c * basis.d_theta[i];
            rp += c * basis.d_phi_over_sin[i];
        }
        SurfacePoint { r, dr_dtheta: rt, dr_dphi: rp * basis.sin_theta, dr_dphi_over_sin: rp }
    }
}

/// `r(theta, phi)` and its analytic gradients, angles in the surface frame.
pub fn eval_surface(surface: &SurfaceModel, theta: f64, phi: f64) -> Result<SurfacePoint> {
    let mut basis = ShEval::new(surface.order());
    eval_sh_basis_into(theta, phi, &mut basis)?;
    let pt = surface.point_from_basis(&basis);
    if pt.r <= 0.0 {
        return Err(Error::NonPositiveRadius { radius: pt.r, theta, phi });
    }
    Ok(pt)
}

/// Outward unit normal in the surface frame from a surface point.
pub fn local_normal(pt: &SurfacePoint, theta: f64, phi: f64) -> Vector3<f64> {
    let (st, ct) = theta.sin_cos();
    let (sp, cp) = phi.sin_cos();
    let r_hat = Vector3::new(st * cp, st * sp, ct);
    let t_hat = Vector3::new(ct * cp, ct * sp, -st);
    let p_hat = Vector3::new(-sp, cp, 0.0);
    // dr_dphi_over_sin is the regular limit of f_phi / sin(theta) at the pole,
    // so the same expression serves theta < POLE_EPS.
    let n = r_hat - (pt.dr_dtheta / pt.r) * t_hat - (pt.dr_dphi_over_sin / pt.r) * p_hat;
    n.normalize()
}

/// Outward unit normal in world coordinates; angles are in the surface frame.
pub fn surface_normal(surface: &SurfaceModel, theta: f64, phi: f64) -> Result<Vector3<f64>> {
    let pt = eval_surface(surface, theta, phi)?;
    if theta < POLE_EPS && !pt.dr_dphi_over_sin.is_finite() {
        return Err(Error::SingularPole);
    }
    Ok(surface.rotation() * local_normal(&pt, theta, phi))
}

/// Finds where the ray from the origin along world direction `d` meets the surface.
pub fn intersect(surface: &SurfaceModel, d: &Vector3<f64>, basis: &mut ShEval) -> Result<SurfaceHit> {
    let rot = surface.rotation();
    intersect_with_rotation(surface, &rot, d, basis)
}

pub fn intersect_with_rotation(
    surface: &SurfaceModel,
    rot: &Matrix3<f64>,
    d: &Vector3<f64>,
    basis: &mut ShEval,
) -> Result<SurfaceHit> {
    let local = rot.transpose() * d;
    let (theta, phi) = direction_angles(&local);
    eval_sh_basis_into(theta, phi, basis)?;
    let pt = surface.point_from_basis(basis);
    if pt.r <= 0.0 {
        return Err(Error::NonPositiveRadius { radius: pt.r, theta, phi });
    }
    let n = rot * local_normal(&pt, theta, phi);
    Ok(SurfaceHit { point: d * pt.r, normal: n })
}

/// Checks `r > 0` on a dense grid of world directions within the cone.
pub fn validate_surface(surface: &SurfaceModel, cone_half_angle: f64) -> Result<()> {
    if surface.tilt_alpha.abs() >= PI / 2.0 || surface.tilt_beta.abs() >= PI / 2.0 {
        return Err(Error::InvalidArgument("tilt magnitude must be below pi/2".into()));
    }
    if surface.coeffs.values.iter().any(|c| !c.is_finite()) {
        return Err(Error::InvalidArgument("non-finite coefficient".into()));
    }
    let rot = surface.rotation().transpose();
    let mut basis = ShEval::new(surface.order());
    let n_theta = 24;
    let n_phi = 48;
    for i in 0..=n_theta {
        let theta = cone_half_angle * i as f64 / n_theta as f64;
        let n_az = if i == 0 { 1 } else { n_phi };
        for j in 0..n_az {
            let phi = 2.0 * PI * j as f64 / n_phi as f64;
            let local = rot * direction_from_angles(theta, phi);
            let (t, p) = direction_angles(&local);
            eval_sh_basis_into(t, p, &mut basis)?;
            let r = surface.point_from_basis(&basis).r;
            if !(r > 0.0) {
                return Err(Error::NonPositiveRadius { radius: r, theta: t, phi: p });
            }
        }
    }
    Ok(())
}

/// Wire form: `{"order", "mask", "tilt": [alpha, beta], "coeffs"}`, with
/// coefficients in masked order when the mask is `quadrant`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SurfaceJson {
    pub order: usize,
    pub mask: MaskKind,
    pub tilt: [f64; 2],
    pub coeffs: Vec<f64>,
}

impl From<&SurfaceModel> for SurfaceJson {
    fn from(s: &SurfaceModel) -> Self {
        Self {
            order: s.coeffs.order,
            mask: s.coeffs.mask,
            tilt: [s.tilt_alpha, s.tilt_beta],
            coeffs: s.coeffs.free(),
        }
    }
}

impl TryFrom<SurfaceJson> for SurfaceModel {
    type Error = Error;

    fn try_from(j: SurfaceJson) -> Result<Self> {
        let coeffs = ShCoefficients::from_free(j.order, j.mask, &j.coeffs)?;
        Ok(SurfaceModel::new(coeffs, j.tilt[0], j.tilt[1]))
    }
}

impl Serialize for SurfaceModel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        SurfaceJson::from(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for SurfaceModel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let j = SurfaceJson::deserialize(d)?;
        SurfaceModel::try_from(j).map_err(serde::de::Error::custom)
    }
}

/// `r(theta)` sampled at fixed azimuths over `[0, theta_max]`, surface frame.
pub fn radial_profile(surface: &SurfaceModel, phi: f64, theta_max: f64, samples: usize) -> Vec<(f64, f64)> {
    let mut basis = ShEval::new(surface.order());
    (0..samples)
        .map(|i| {
            let theta = theta_max * i as f64 / (samples.max(2) - 1) as f64;
            eval_sh_basis_into(theta, phi, &mut basis).expect("theta within [0, pi]");
            (theta, surface.point_from_basis(&basis).r)
        })
        .collect()
}
