use std::f64::consts::PI;

use lumenforge::designgen::TargetSpec;
use lumenforge::optics::*;
use lumenforge::shsurface::{MaskKind, SurfaceModel};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Gauss-Legendre nodes and weights on [-1, 1].
fn gauss_legendre(n: usize) -> Vec<(f64, f64)> {
    (0..n)
        .map(|i| {
            let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (mut p0, mut p1) = (1.0, x);
                for k in 2..=n {
                    let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                    p0 = p1;
                    p1 = p2;
                }
                dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
                let dx = p1 / dp;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            (x, 2.0 / ((1.0 - x * x) * dp * dp))
        })
        .collect()
}

/// Fraction of launched flux landing in an axis-aligned rectangle on a plane
/// at distance `d`: integral of cos^4(theta) / (pi sin^2(theta_max) d^2).
fn rect_flux(cone: f64, d: f64, x0: f64, x1: f64, y0: f64, y1: f64, gl: &[(f64, f64)]) -> f64 {
    let norm = PI * cone.sin().powi(2) * d * d;
    let (hx, hy) = (0.5 * (x1 - x0), 0.5 * (y1 - y0));
    let mut sum = 0.0;
    for (u, wu) in gl {
        for (v, wv) in gl {
            let x = x0 + hx * (u + 1.0);
            let y = y0 + hy * (v + 1.0);
            let c2 = d * d / (d * d + x * x + y * y);
            // points outside the emission cone receive nothing
            if c2 >= cone.cos().powi(2) {
                sum += wu * wv * c2 * c2;
            }
        }
    }
    sum * hx * hy / norm
}

fn analytic_map(scenario: &Scenario, rx: &Receiver, n: usize) -> Vec<f64> {
    let gl = gauss_legendre(6);
    let (x0, y0) = (rx.center[0] - 0.5 * rx.size[0], rx.center[1] - 0.5 * rx.size[1]);
    let (dx, dy) = (rx.size[0] / n as f64, rx.size[1] / n as f64);
    let mut out = vec![0.0; n * n];
    for r in 0..n {
        for c in 0..n {
            let xa = x0 + c as f64 * dx;
            let ya = y0 + r as f64 * dy;
            out[r * n + c] = rect_flux(scenario.cone_half_angle, rx.plane_z.abs(), xa, xa + dx, ya, ya + dy, &gl);
        }
    }
    out
}

fn rms_rel_dev(m: &[f64], a: &[f64]) -> f64 {
    let n = a.len() as f64;
    let mean = a.iter().sum::<f64>() / n;
    (m.iter().zip(a).map(|(m, a)| (m - a).powi(2)).sum::<f64>() / n).sqrt() / mean
}

fn bare(target: &TargetSpec, n_rays: usize, seed: u64) -> IrradianceMap {
    let s = Scenario::lens();
    trace(&s, Optic::Bare, target, &TraceOptions { n_rays, seed, grid_n: s.grid_n }).unwrap().0
}

fn as_map(template: &IrradianceMap, values: Vec<f64>) -> IrradianceMap {
    IrradianceMap { values, ..template.clone() }
}

#[test]
fn bare_source_matches_cos4_law() {
    let s = Scenario::lens();
    for target in [TargetSpec::Rect { w: 3000.0, h: 3000.0, d: 1200.0 }, TargetSpec::Rect { w: 4000.0, h: 2500.0, d: 1000.0 }] {
        let map = bare(&target, 2_000_000, 11);
        let analytic = analytic_map(&s, &map.receiver, s.grid_n);
        let ms = smooth(&map, s.kernel_px).unwrap();
        let an = smooth(&as_map(&map, analytic), s.kernel_px).unwrap();
        let dev = rms_rel_dev(&ms.values, &an.values);
        assert!(dev < 0.02, "smoothed RMS deviation {dev}");
        let total: f64 = map.values.iter().sum();
        assert!((total * map.rays_launched as f64 - map.rays_binned as f64).abs() < 1e-6);
    }
}

#[test]
fn monte_carlo_noise_scales_as_inverse_sqrt() {
    let s = Scenario::lens();
    let target = TargetSpec::Rect { w: 3000.0, h: 3000.0, d: 1200.0 };
    let ns = [100_000usize, 400_000, 1_600_000];
    let mut pts = Vec::new();
    for n in ns {
        let map = bare(&target, n, 5);
        let analytic = analytic_map(&s, &map.receiver, s.grid_n);
        pts.push(((n as f64).ln(), rms_rel_dev(&map.values, &analytic).ln()));
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / 3.0;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / 3.0;
    let slope = pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / pts.iter().map(|(x, _)| (x - mx).powi(2)).sum::<f64>();
    assert!((slope + 0.5).abs() < 0.1, "slope {slope}");
}

#[test]
fn mirror_sphere_spill_matches_overlap() {
    let gl = gauss_legendre(24);
    for (size, x, y) in [(500.0, 0.0, 0.0), (500.0, 300.0, 100.0), (6000.0, 0.0, 0.0), (8000.0, 1500.0, -500.0)] {
        let mut s = Scenario::reflector();
        s.receiver_size = size;
        let sphere = SurfaceModel::sphere(10, MaskKind::Full, 50.0);
        let target = TargetSpec::Offset { x, y };
        let (map, stats) = trace_design(&s, &sphere, &target, 2_000_000, 3).unwrap();
        // rays retrace through the origin, so the image is the bare cone mirrored
        let h = 0.5 * size;
        let inside = rect_flux(s.cone_half_angle, s.target_plane_z.abs(), -x - h, -x + h, -y - h, -y + h, &gl);
        assert!((stats.spill_fraction - (1.0 - inside)).abs() < 0.01, "spill {} vs {}", stats.spill_fraction, 1.0 - inside);
        assert_eq!(map.rays_lost, 0);
        assert_eq!(map.rays_binned + map.rays_spilled + map.rays_lost, map.rays_launched);
    }
}

#[test]
fn counters_are_conserved() {
    let lens = Scenario::lens();
    let refl = Scenario::reflector();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for i in 0..6 {
        let mut surf = SurfaceModel::sphere(10, MaskKind::Full, 40.0);
        for c in surf.coeffs.values.iter_mut().skip(1) {
            *c = rng.random_range(-1.0..1.0);
        }
        let (s, t, sf) = if i % 2 == 0 {
            let mut q = SurfaceModel::sphere(10, MaskKind::Quadrant, 25.0);
            q.coeffs.values[6] = rng.random_range(-3.0..3.0);
            (&lens, TargetSpec::Rect { w: 3000.0, h: 2000.0, d: 1200.0 }, q)
        } else {
            surf.tilt_alpha = rng.random_range(-0.3..0.3);
            (&refl, TargetSpec::Offset { x: 200.0, y: 50.0 }, surf)
        };
        let n_rays = 50_000 + i * 777;
        let (map, stats) = trace_design(s, &sf, &t, n_rays, i as u64).unwrap();
        assert_eq!(map.rays_binned + map.rays_spilled + map.rays_lost, n_rays as u64);
        assert!(map.values.iter().all(|v| *v >= 0.0));
        assert!((0.0..=1.0).contains(&stats.spill_fraction) && (0.0..=1.0).contains(&stats.loss_fraction));
    }
}

#[test]
fn trace_is_independent_of_thread_count() {
    let s = Scenario::reflector();
    let mut surf = SurfaceModel::sphere(10, MaskKind::Full, 50.0);
    surf.coeffs.values[2] = 3.0;
    surf.tilt_beta = 0.2;
    let target = TargetSpec::Offset { x: 0.0, y: 0.0 };
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| trace_design(&s, &surf, &target, 200_000, 42).unwrap().0)
    };
    let one = run(1);
    assert_eq!(one, run(2));
    assert_eq!(one, run(5));
    assert_ne!(one, trace_design(&s, &surf, &target, 200_000, 43).unwrap().0);
}

#[test]
fn lambertian_hemisphere_mean_cosine() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 1_000_000;
    let (mut sum, mut sum2) = (0.0, 0.0);
    for _ in 0..n {
        let c = sample_lambertian(PI / 2.0, &mut rng).z;
        sum += c;
        sum2 += c * c;
    }
    let mean = sum / n as f64;
    let sigma = ((sum2 / n as f64 - mean * mean) / n as f64).sqrt();
    assert!((mean - 2.0 / 3.0).abs() < 3.0 * sigma, "mean {mean}");
}

#[test]
fn reflection_preserves_angle_and_plane() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let unit = |rng: &mut ChaCha8Rng| {
        Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)).normalize()
    };
    for _ in 0..1000 {
        let d = unit(&mut rng);
        let mut n = unit(&mut rng);
        if d.dot(&n) > 0.0 {
            n = -n;
        }
        let r = reflect(&d, &n);
        assert!((r.norm() - 1.0).abs() < 1e-12);
        assert!((r.dot(&n) + d.dot(&n)).abs() < 1e-12);
        assert!(d.cross(&n).dot(&r).abs() < 1e-12);
    }
}

#[test]
fn refraction_obeys_snell() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..1000 {
        let n = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 1.0).normalize();
        let d = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 1.0).normalize();
        let (n1, n2) = (1.49, 1.0);
        let sin_i = d.cross(&n).norm();
        match refract(&d, &n, n1, n2) {
            Refraction::Transmitted(t) => {
                assert!((n1 * sin_i - n2 * t.cross(&n).norm()).abs() < 1e-12);
                assert!(d.cross(&n).dot(&t).abs() < 1e-12);
                assert!(t.dot(&n) * d.dot(&n) > 0.0);
            }
            Refraction::TotalInternalReflection => assert!(n1 * sin_i > n2),
        }
    }
}

#[test]
fn metric_invariances() {
    let s = Scenario::lens();
    let map = bare(&TargetSpec::Rect { w: 3000.0, h: 3000.0, d: 1200.0 }, 300_000, 4);
    let base = nonuniformity(&map).unwrap();
    let scaled = as_map(&map, map.values.iter().map(|v| v * 7.5).collect());
    assert!((nonuniformity(&scaled).unwrap() - base).abs() < 1e-9);

    let analytic = analytic_map(&s, &map.receiver, s.grid_n);
    let sym = as_map(&map, analytic);
    let a = nonuniformity(&smooth(&sym, 3).unwrap()).unwrap();
    let b = nonuniformity(&smooth(&sym.transposed(), 3).unwrap()).unwrap();
    assert!((a - b).abs() < 1e-9);
    assert!(matches!(nonuniformity_of(&[0.0; 4]), Err(lumenforge::Error::EmptyMap)));
}
