//! Monte Carlo raytracing of a Lambertian point source through a single
//! freeform surface, receiver binning, smoothing and the non-uniformity
//! metric.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::designgen::TargetSpec;
use crate::error::{Error, Result};
use crate::rng::substream;
use crate::shsurface::{
    direction_angles, eval_sh_basis_into, local_normal, validate_surface, MaskKind, ShEval, SurfaceModel,
    SurfacePoint, DEFAULT_ORDER,
};

/// Rays per deterministic work chunk.
pub const CHUNK_RAYS: usize = 1 << 14;

pub const DEFAULT_RAYS: usize = 2_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    ReflectorOffset,
    LensRect,
}

impl ScenarioKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioKind::ReflectorOffset => "reflector_offset",
            ScenarioKind::LensRect => "lens_rect",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "reflector_offset" => Ok(ScenarioKind::ReflectorOffset),
            "lens_rect" => Ok(ScenarioKind::LensRect),
            other => Err(Error::InvalidArgument(format!("unknown scenario '{other}'"))),
        }
    }

    pub fn scenario(self) -> Scenario {
        match self {
            ScenarioKind::ReflectorOffset => Scenario::reflector(),
            ScenarioKind::LensRect => Scenario::lens(),
        }
    }
}

impl std::fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Fixed optical geometry shared by every design of one kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub kind: ScenarioKind,
    pub cone_half_angle: f64,
    pub refractive_index: f64,
    pub base_radius: f64,
    pub inner_radius: f64,
    /// Receiver plane for the reflector; the lens uses the target distance.
    pub target_plane_z: f64,
    /// Receiver size for the reflector (square side); unused for the lens.
    pub receiver_size: f64,
    pub grid_n: usize,
    pub kernel_px: usize,
    pub order: usize,
    pub mask: MaskKind,
}

impl Scenario {
    /// Aluminum reflector over 170 degrees of emission, 500 mm square at 3 m.
    pub fn reflector() -> Self {
        Self {
            kind: ScenarioKind::ReflectorOffset,
            cone_half_angle: 85f64.to_radians(),
            refractive_index: 1.0,
            base_radius: 50.0,
            inner_radius: 0.0,
            target_plane_z: -3000.0,
            receiver_size: 500.0,
            grid_n: 81,
            kernel_px: 5,
            order: DEFAULT_ORDER,
            mask: MaskKind::Full,
        }
    }

    /// PMMA lens over 140 degrees of emission, rectangle at distance D.
    pub fn lens() -> Self {
        Self {
            kind: ScenarioKind::LensRect,
            cone_half_angle: 70f64.to_radians(),
            refractive_index: 1.49,
            base_radius: 25.0,
            inner_radius: 15.0,
            target_plane_z: 0.0,
            receiver_size: 0.0,
            grid_n: 41,
            kernel_px: 3,
            order: DEFAULT_ORDER,
            mask: MaskKind::Quadrant,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cone_half_angle > 0.0 && self.cone_half_angle < PI / 2.0) {
            return Err(Error::InvalidArgument("cone half angle must lie in (0, pi/2)".into()));
        }
        if self.grid_n % 2 == 0 || self.kernel_px % 2 == 0 || self.kernel_px > self.grid_n {
            return Err(Error::InvalidArgument("grid and kernel sizes must be odd, kernel <= grid".into()));
        }
        if self.kind == ScenarioKind::LensRect && self.refractive_index <= 1.0 {
            return Err(Error::InvalidArgument("lens index must exceed 1".into()));
        }
        Ok(())
    }

    /// Receiver rectangle for a target.
    pub fn receiver(&self, target: &TargetSpec) -> Result<Receiver> {
        let rx = match (self.kind, *target) {
            (ScenarioKind::ReflectorOffset, TargetSpec::Offset { x, y }) => Receiver {
                center: [x, y],
                size: [self.receiver_size, self.receiver_size],
                plane_z: self.target_plane_z,
            },
            (ScenarioKind::LensRect, TargetSpec::Rect { w, h, d }) => {
                if !(d > 0.0) {
                    return Err(Error::DegenerateTarget(format!("distance {d} must be positive")));
                }
                Receiver { center: [0.0, 0.0], size: [w, h], plane_z: d }
            }
            (kind, t) => {
                return Err(Error::ScenarioMismatch { model: kind.to_string(), request: t.kind().to_string() })
            }
        };
        if !(rx.size[0] > 0.0 && rx.size[1] > 0.0) || !rx.center.iter().all(|c| c.is_finite()) {
            return Err(Error::DegenerateTarget(format!("receiver {:?} x {:?}", rx.center, rx.size)));
        }
        Ok(rx)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Receiver {
    pub center: [f64; 2],
    pub size: [f64; 2],
    pub plane_z: f64,
}

impl Receiver {
    /// Bin of a plane point, or `None` outside the rectangle.
    pub fn bin(&self, x: f64, y: f64, n: usize) -> Option<(usize, usize)> {
        let fx = (x - (self.center[0] - 0.5 * self.size[0])) / self.size[0];
        let fy = (y - (self.center[1] - 0.5 * self.size[1])) / self.size[1];
        if !(0.0..=1.0).contains(&fx) || !(0.0..=1.0).contains(&fy) {
            return None;
        }
        let ix = ((fx * n as f64) as usize).min(n - 1);
        let iy = ((fy * n as f64) as usize).min(n - 1);
        Some((ix, iy))
    }
}

/// Binned receiver flux. `values[row * grid_n + col]`, row 0 at minimum y.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IrradianceMap {
    pub grid_n: usize,
    pub values: Vec<f64>,
    pub receiver: Receiver,
    pub rays_launched: u64,
    pub rays_binned: u64,
    pub rays_spilled: u64,
    pub rays_lost: u64,
    pub seed: u64,
}

impl IrradianceMap {
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.grid_n + col]
    }

    pub fn transposed(&self) -> Self {
        let n = self.grid_n;
        let mut out = self.clone();
        for r in 0..n {
            for c in 0..n {
                out.values[c * n + r] = self.values[r * n + c];
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceStats {
    pub spill_fraction: f64,
    pub loss_fraction: f64,
    pub wall_time_s: f64,
}

/// Lambertian direction within a cone about +z.
///
/// Flux density is proportional to `cos(theta) sin(theta)`, so
/// `sin^2(theta)` is uniform on `[0, sin^2(theta_max)]`.
pub fn sample_lambertian<R: Rng + ?Sized>(cone_half_angle: f64, rng: &mut R) -> Vector3<f64> {
    let u: f64 = rng.random();
    let v: f64 = rng.random();
    let smax = cone_half_angle.sin();
    let st = (u * smax * smax).sqrt();
    let ct = (1.0 - st * st).sqrt();
    let (sp, cp) = (2.0 * PI * v).sin_cos();
    Vector3::new(st * cp, st * sp, ct)
}

/// Fraction of the hemispherical flux emitted within the cone.
pub fn cone_flux_fraction(cone_half_angle: f64) -> f64 {
    cone_half_angle.sin().powi(2)
}

/// Specular reflection. The sign of `n` does not matter.
pub fn reflect(d: &Vector3<f64>, n: &Vector3<f64>) -> Vector3<f64> {
    d - 2.0 * d.dot(n) * n
}

pub fn is_grazing(d: &Vector3<f64>, n: &Vector3<f64>) -> bool {
    d.dot(n).abs() < 1e-9
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Refraction {
    Transmitted(Vector3<f64>),
    TotalInternalReflection,
}

/// Snell's law in vector form from index `n1` into `n2`. `n` may face either way.
pub fn refract(d: &Vector3<f64>, n: &Vector3<f64>, n1: f64, n2: f64) -> Refraction {
    // orient the normal against the incoming ray
    let (n, cos_i) = {
        let c = -d.dot(n);
        if c < 0.0 {
            (-n, -c)
        } else {
            (*n, c)
        }
    };
    let eta = n1 / n2;
    let k = 1.0 - eta * eta * (1.0 - cos_i * cos_i);
    if k < 0.0 {
        return Refraction::TotalInternalReflection;
    }
    let t = eta * d + (eta * cos_i - k.sqrt()) * n;
    Refraction::Transmitted(t.normalize())
}

/// What the tracer does with each ray.
#[derive(Debug, Clone, Copy)]
pub enum Optic<'a> {
    /// No optic: rays travel straight from the source to the plane.
    Bare,
    Surface(&'a SurfaceModel),
}

pub(crate) enum RayFate {
    Hit(f64, f64),
    Lost,
}

/// Redirects a source ray at a known surface point and propagates it to the plane.
pub(crate) fn redirect(
    scenario: &Scenario,
    plane_z: f64,
    rot: &Matrix3<f64>,
    d: &Vector3<f64>,
    theta: f64,
    phi: f64,
    pt: &SurfacePoint,
) -> RayFate {
    if !(pt.r > 0.0) {
        return RayFate::Lost;
    }
    let n = rot * local_normal(pt, theta, phi);
    let p = d * pt.r;
    let out = match scenario.kind {
        ScenarioKind::ReflectorOffset => reflect(d, &n),
        ScenarioKind::LensRect => match refract(d, &n, scenario.refractive_index, 1.0) {
            Refraction::Transmitted(t) => t,
            Refraction::TotalInternalReflection => return RayFate::Lost,
        },
    };
    propagate(&p, &out, plane_z)
}

fn propagate(p: &Vector3<f64>, dir: &Vector3<f64>, plane_z: f64) -> RayFate {
    let dz = plane_z - p.z;
    // ray must move toward the plane
    if dir.z * dz <= 0.0 || dir.z.abs() < 1e-12 {
        return RayFate::Lost;
    }
    let t = dz / dir.z;
    RayFate::Hit(p.x + t * dir.x, p.y + t * dir.y)
}

/// Per-ray intersection with a surface in a tilted frame.
pub(crate) fn trace_ray(
    scenario: &Scenario,
    plane_z: f64,
    optic: Optic<'_>,
    rot: &Matrix3<f64>,
    d: &Vector3<f64>,
    basis: &mut ShEval,
) -> RayFate {
    match optic {
        Optic::Bare => propagate(&Vector3::zeros(), d, plane_z),
        Optic::Surface(surface) => {
            let local = rot.transpose() * d;
            let (theta, phi) = direction_angles(&local);
            if eval_sh_basis_into(theta, phi, basis).is_err() {
                return RayFate::Lost;
            }
            let pt = surface.point_from_basis(basis);
            redirect(scenario, plane_z, rot, d, theta, phi, &pt)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceOptions {
    pub n_rays: usize,
    pub seed: u64,
    pub grid_n: usize,
}

struct ChunkTally {
    counts: Vec<u32>,
    binned: u64,
    spilled: u64,
    lost: u64,
}

fn trace_chunk(
    scenario: &Scenario,
    optic: Optic<'_>,
    receiver: &Receiver,
    rot: &Matrix3<f64>,
    opts: &TraceOptions,
    chunk: usize,
) -> ChunkTally {
    let n = opts.grid_n;
    let start = chunk * CHUNK_RAYS;
    let count = CHUNK_RAYS.min(opts.n_rays - start);
    let mut rng = substream(opts.seed, chunk as u64);
    let order = match optic {
        Optic::Surface(s) => s.order(),
        Optic::Bare => 0,
    };
    let mut basis = ShEval::new(order);
    let mut tally = ChunkTally { counts: vec![0; n * n], binned: 0, spilled: 0, lost: 0 };
    for _ in 0..count {
        let d = sample_lambertian(scenario.cone_half_angle, &mut rng);
        match trace_ray(scenario, receiver.plane_z, optic, rot, &d, &mut basis) {
            RayFate::Lost => tally.lost += 1,
            RayFate::Hit(x, y) => match receiver.bin(x, y, n) {
                Some((ix, iy)) => {
                    tally.counts[iy * n + ix] += 1;
                    tally.binned += 1;
                }
                None => tally.spilled += 1,
            },
        }
    }
    tally
}

/// Traces `opts.n_rays` rays through `optic` onto the target receiver.
///
/// The map holds the fraction of launched flux per bin and is identical for
/// a given seed regardless of how many worker threads run the chunks.
pub fn trace(
    scenario: &Scenario,
    optic: Optic<'_>,
    target: &TargetSpec,
    opts: &TraceOptions,
) -> Result<(IrradianceMap, TraceStats)> {
    #[cfg(not(target_arch = "wasm32"))]
    let started = std::time::Instant::now();
    scenario.validate()?;
    let receiver = scenario.receiver(target)?;
    if opts.n_rays == 0 {
        return Err(Error::InvalidArgument("n_rays must be at least 1".into()));
    }
    if opts.grid_n == 0 {
        return Err(Error::InvalidArgument("grid_n must be at least 1".into()));
    }
    let rot = match optic {
        Optic::Surface(s) => {
            validate_surface(s, scenario.cone_half_angle)?;
            s.rotation()
        }
        Optic::Bare => Matrix3::identity(),
    };
    let n_chunks = opts.n_rays.div_ceil(CHUNK_RAYS);
    let run = |c: usize| trace_chunk(scenario, optic, &receiver, &rot, opts, c);

    #[cfg(feature = "parallel")]
    let tallies: Vec<ChunkTally> = {
        use rayon::prelude::*;
        (0..n_chunks).into_par_iter().map(run).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let tallies: Vec<ChunkTally> = (0..n_chunks).map(run).collect();

    let n = opts.grid_n;
    let mut counts = vec![0u64; n * n];
    let (mut binned, mut spilled, mut lost) = (0, 0, 0);
    for t in &tallies {
        for (acc, c) in counts.iter_mut().zip(&t.counts) {
            *acc += *c as u64;
        }
        binned += t.binned;
        spilled += t.spilled;
        lost += t.lost;
    }
    let launched = opts.n_rays as u64;
    let values = counts.iter().map(|c| *c as f64 / launched as f64).collect();
    let map = IrradianceMap {
        grid_n: n,
        values,
        receiver,
        rays_launched: launched,
        rays_binned: binned,
        rays_spilled: spilled,
        rays_lost: lost,
        seed: opts.seed,
    };
    #[cfg(not(target_arch = "wasm32"))]
    let wall_time_s = started.elapsed().as_secs_f64();
    #[cfg(target_arch = "wasm32")]
    let wall_time_s = 0.0;
    let stats = TraceStats {
        spill_fraction: spilled as f64 / launched as f64,
        loss_fraction: lost as f64 / launched as f64,
        wall_time_s,
    };
    Ok((map, stats))
}

/// Traces a surface design with the scenario's grid size.
pub fn trace_design(
    scenario: &Scenario,
    surface: &SurfaceModel,
    target: &TargetSpec,
    n_rays: usize,
    seed: u64,
) -> Result<(IrradianceMap, TraceStats)> {
    let opts = TraceOptions { n_rays, seed, grid_n: scenario.grid_n };
    trace(scenario, Optic::Surface(surface), target, &opts)
}

/// Normalized box filter; windows clipped at the border average over the
/// in-grid cells only.
pub fn smooth(map: &IrradianceMap, kernel_px: usize) -> Result<IrradianceMap> {
    let n = map.grid_n;
    if kernel_px % 2 == 0 || kernel_px > n {
        return Err(Error::InvalidArgument(format!("kernel {kernel_px} must be odd and at most {n}")));
    }
    if kernel_px == 1 {
        return Ok(map.clone());
    }
    let h = (kernel_px / 2) as isize;
    let mut out = map.clone();
    for r in 0..n as isize {
        for c in 0..n as isize {
            let mut sum = 0.0;
            let mut cnt = 0usize;
            for rr in (r - h).max(0)..=(r + h).min(n as isize - 1) {
                for cc in (c - h).max(0)..=(c + h).min(n as isize - 1) {
                    sum += map.values[rr as usize * n + cc as usize];
                    cnt += 1;
                }
            }
            out.values[r as usize * n + c as usize] = sum / cnt as f64;
        }
    }
    Ok(out)
}

/// `100 * RMS(deviation from mean) / mean` over every cell.
pub fn nonuniformity(map: &IrradianceMap) -> Result<f64> {
    nonuniformity_of(&map.values)
}

pub fn nonuniformity_of(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyMap);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if !(mean > 0.0) {
        return Err(Error::EmptyMap);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok(100.0 * var.sqrt() / mean)
}

/// Result of a full-grade or preview evaluation of one design.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub nonuniformity_pct: f64,
    pub spill_fraction: f64,
    pub loss_fraction: f64,
    /// Smoothed map the metric was computed on.
    pub smoothed: IrradianceMap,
    pub raw: IrradianceMap,
    pub stats: TraceStats,
}

/// Trace, smooth with the scenario kernel, and score.
pub fn evaluate_design(
    scenario: &Scenario,
    surface: &SurfaceModel,
    target: &TargetSpec,
    n_rays: usize,
    seed: u64,
) -> Result<Evaluation> {
    let (raw, stats) = trace_design(scenario, surface, target, n_rays, seed)?;
    let smoothed = smooth(&raw, scenario.kernel_px)?;
    let nonuniformity_pct = nonuniformity(&smoothed)?;
    Ok(Evaluation {
        nonuniformity_pct,
        spill_fraction: stats.spill_fraction,
        loss_fraction: stats.loss_fraction,
        smoothed,
        raw,
        stats,
    })
}

/// CSV with a `# extent_mm=xc,yc,W,H rays=N seed=S` header, row 0 at minimum y.
pub fn write_irradiance_csv<W: Write>(map: &IrradianceMap, mut w: W) -> Result<()> {
    let rx = &map.receiver;
    writeln!(
        w,
        "# extent_mm={},{},{},{} rays={} seed={}",
        rx.center[0], rx.center[1], rx.size[0], rx.size[1], map.rays_launched, map.seed
    )?;
    let n = map.grid_n;
    let mut line = String::new();
    for r in 0..n {
        line.clear();
        for c in 0..n {
            if c > 0 {
                line.push(',');
            }
            write!(line, "{}", map.values[r * n + c]).expect("write to String");
        }
        writeln!(w, "{line}")?;
    }
    Ok(())
}

/// Parsed irradiance CSV. Counters other than `rays_launched` are not stored
/// in the file and come back as zero.
pub fn read_irradiance_csv<R: BufRead>(r: R) -> Result<IrradianceMap> {
    let mut lines = r.lines();
    let header = lines.next().ok_or_else(|| Error::Format("empty irradiance file".into()))??;
    let header = header
        .strip_prefix("# ")
        .ok_or_else(|| Error::Format("missing irradiance header".into()))?;
    let mut extent = None;
    let mut rays = None;
    let mut seed = None;
    for field in header.split_whitespace() {
        let (k, v) = field.split_once('=').ok_or_else(|| Error::Format(format!("bad header field {field}")))?;
        match k {
            "extent_mm" => {
                let e: Vec<f64> = v
                    .split(',')
                    .map(|x| x.parse::<f64>().map_err(|e| Error::Format(e.to_string())))
                    .collect::<Result<_>>()?;
                if e.len() != 4 {
                    return Err(Error::Format("extent needs four values".into()));
                }
                extent = Some(e);
            }
            "rays" => rays = Some(v.parse::<u64>().map_err(|e| Error::Format(e.to_string()))?),
            "seed" => seed = Some(v.parse::<u64>().map_err(|e| Error::Format(e.to_string()))?),
            _ => {}
        }
    }
    let extent = extent.ok_or_else(|| Error::Format("header lacks extent_mm".into()))?;
    let mut values = Vec::new();
    let mut rows = 0;
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        for v in line.split(',') {
            values.push(v.trim().parse::<f64>().map_err(|e| Error::Format(e.to_string()))?);
        }
        rows += 1;
    }
    if rows == 0 || values.len() != rows * rows {
        return Err(Error::Format(format!("expected a square grid, got {} values in {rows} rows", values.len())));
    }
    Ok(IrradianceMap {
        grid_n: rows,
        values,
        receiver: Receiver { center: [extent[0], extent[1]], size: [extent[2], extent[3]], plane_z: 0.0 },
        rays_launched: rays.unwrap_or(0),
        rays_binned: 0,
        rays_spilled: 0,
        rays_lost: 0,
        seed: seed.unwrap_or(0),
    })
}

/// 8-bit binary PGM, linear scale, top row at maximum y.
pub fn write_pgm<W: Write>(map: &IrradianceMap, mut w: W) -> Result<()> {
    let n = map.grid_n;
    let max = map.values.iter().cloned().fold(0.0, f64::max);
    write!(w, "P5\n{n} {n}\n255\n")?;
    let mut buf = Vec::with_capacity(n * n);
    for r in (0..n).rev() {
        for c in 0..n {
            let v = if max > 0.0 { map.values[r * n + c] / max } else { 0.0 };
            buf.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn map_from(n: usize, values: Vec<f64>) -> IrradianceMap {
        IrradianceMap {
            grid_n: n,
            values,
            receiver: Receiver { center: [0.0, 0.0], size: [1.0, 1.0], plane_z: 1.0 },
            rays_launched: 0,
            rays_binned: 0,
            rays_spilled: 0,
            rays_lost: 0,
            seed: 0,
        }
    }

    #[test]
    fn reflect_examples() {
        let d = Vector3::new(0.0, 0.0, -1.0);
        let n = Vector3::new(0.0, 0.0, 1.0);
        assert_eq!(reflect(&d, &n), Vector3::new(0.0, 0.0, 1.0));
        let d = Vector3::new(1.0, 0.0, -1.0).normalize();
        let r = reflect(&d, &n);
        assert_abs_diff_eq!((r - Vector3::new(1.0, 0.0, 1.0).normalize()).norm(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn refract_normal_incidence() {
        let d = Vector3::new(0.0, 0.0, 1.0);
        let n = Vector3::new(0.0, 0.0, 1.0);
        match refract(&d, &n, 1.49, 1.0) {
            Refraction::Transmitted(t) => assert_abs_diff_eq!((t - d).norm(), 0.0, epsilon = 1e-15),
            Refraction::TotalInternalReflection => panic!("unexpected TIR"),
        }
    }

    #[test]
    fn refract_thirty_degrees_out_of_pmma() {
        let i = 30f64.to_radians();
        let d = Vector3::new(i.sin(), 0.0, i.cos());
        let n = Vector3::new(0.0, 0.0, 1.0);
        let Refraction::Transmitted(t) = refract(&d, &n, 1.49, 1.0) else { panic!("TIR") };
        let angle = t.x.atan2(t.z);
        assert_abs_diff_eq!(angle, (1.49f64 * 0.5).asin(), epsilon = 1e-12);
        assert_abs_diff_eq!(angle.to_degrees(), 48.15, epsilon = 0.01);
    }

    #[test]
    fn refract_past_critical_angle() {
        let i = 45f64.to_radians();
        assert!(i > (1.0f64 / 1.49).asin());
        let d = Vector3::new(i.sin(), 0.0, i.cos());
        let n = Vector3::new(0.0, 0.0, -1.0);
        assert_eq!(refract(&d, &n, 1.49, 1.0), Refraction::TotalInternalReflection);
    }

    #[test]
    fn lambertian_stays_in_cone() {
        let mut rng = substream(1, 0);
        let cone = 70f64.to_radians();
        for _ in 0..10_000 {
            let d = sample_lambertian(cone, &mut rng);
            assert!(d.z >= cone.cos() - 1e-12);
            assert_abs_diff_eq!(d.norm(), 1.0, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(cone_flux_fraction(cone), 0.8830, epsilon = 1e-4);
    }

    #[test]
    fn smoothing_fixed_points() {
        let m = map_from(5, vec![2.5; 25]);
        let s = smooth(&m, 3).unwrap();
        assert!(s.values.iter().all(|v| (v - 2.5).abs() < 1e-15));
        let m = map_from(3, (0..9).map(|v| v as f64).collect());
        assert_eq!(smooth(&m, 1).unwrap(), m);
        assert!(smooth(&m, 2).is_err());
        assert!(smooth(&m, 5).is_err());
    }

    #[test]
    fn smoothing_hand_check() {
        // 3x3 grid, kernel 3: corner averages its 2x2 block, center averages all
        let m = map_from(3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
        let s = smooth(&m, 3).unwrap();
        assert_abs_diff_eq!(s.at(0, 0), 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.at(1, 1), 5.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.at(0, 1), 3.5, epsilon = 1e-12);
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert_abs_diff_eq!(mean(&s.values), mean(&m.values), epsilon = 1e-9 * 5.0);
    }

    #[test]
    fn metric_hand_check() {
        let m = map_from(2, vec![1.0, 1.0, 1.0, 3.0]);
        assert_abs_diff_eq!(nonuniformity(&m).unwrap(), 57.735_026_918_962_58, epsilon = 1e-9);
        assert_abs_diff_eq!(nonuniformity(&map_from(2, vec![4.0; 4])).unwrap(), 0.0, epsilon = 1e-15);
        assert!(matches!(nonuniformity(&map_from(2, vec![0.0; 4])), Err(Error::EmptyMap)));
    }

    #[test]
    fn presets_match_captions() {
        let r = Scenario::reflector();
        assert_eq!((r.grid_n, r.kernel_px), (81, 5));
        let l = Scenario::lens();
        assert_eq!((l.grid_n, l.kernel_px), (41, 3));
        r.validate().unwrap();
        l.validate().unwrap();
    }

    #[test]
    fn degenerate_target() {
        let s = Scenario::lens();
        let t = TargetSpec::Rect { w: -1.0, h: 2000.0, d: 1000.0 };
        assert!(matches!(s.receiver(&t), Err(Error::DegenerateTarget(_))));
        let t = TargetSpec::Offset { x: 0.0, y: 0.0 };
        assert!(matches!(s.receiver(&t), Err(Error::ScenarioMismatch { .. })));
    }

    #[test]
    fn csv_round_trip() {
        let m = map_from(3, vec![0.1, 0.25, 1.0 / 3.0, 0.0, 1e-9, 7.0, 8.5, 9.0, 2.0]);
        let mut buf = Vec::new();
        write_irradiance_csv(&m, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("# extent_mm=0,0,1,1 rays=0 seed=0\n"));
        let back = read_irradiance_csv(&buf[..]).unwrap();
        assert_eq!(back.values, m.values);
        assert_eq!(back.receiver.size, m.receiver.size);
        let mut pgm = Vec::new();
        write_pgm(&m, &mut pgm).unwrap();
        assert!(pgm.starts_with(b"P5\n3 3\n255\n"));
        assert_eq!(pgm.len(), 11 + 9);
    }
}
