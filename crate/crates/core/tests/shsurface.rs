use std::f64::consts::PI;
use std::time::Instant;

use lumenforge::shsurface::*;
use nalgebra::Vector3;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Gauss-Legendre nodes and weights on [-1, 1] by Newton iteration.
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

#[test]
fn gram_matrix_is_identity() {
    let start = Instant::now();
    let order = 10;
    let n = basis_len(order);
    let mut gram = vec![0.0; n * n];
    let mut eval = ShEval::new(order);
    let n_phi = 400;
    for (x, w) in gauss_legendre(200) {
        let theta = x.acos();
        for k in 0..n_phi {
            let phi = 2.0 * PI * k as f64 / n_phi as f64;
            eval_sh_basis_into(theta, phi, &mut eval).unwrap();
            let wt = w * 2.0 * PI / n_phi as f64;
            for i in 0..n {
                let vi = eval.value[i] * wt;
                for j in i..n {
                    gram[i * n + j] += vi * eval.value[j];
                }
            }
        }
    }
    for i in 0..n {
        for j in i..n {
            let expect = if i == j { 1.0 } else { 0.0 };
            assert!((gram[i * n + j] - expect).abs() < 1e-6, "G[{i}][{j}] = {}", gram[i * n + j]);
        }
    }
    assert!(start.elapsed().as_secs_f64() < 10.0);
}

#[test]
fn angular_derivatives_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let order = 10;
    let h = 1e-6;
    for _ in 0..50 {
        let theta = rng.random_range(0.05..PI - 0.05);
        let phi = rng.random_range(-PI..PI);
        let mut e = ShEval::new(order);
        eval_sh_basis_into(theta, phi, &mut e).unwrap();
        let tp = eval_sh_basis(order, theta + h, phi).unwrap();
        let tm = eval_sh_basis(order, theta - h, phi).unwrap();
        let pp = eval_sh_basis(order, theta, phi + h).unwrap();
        let pm = eval_sh_basis(order, theta, phi - h).unwrap();
        for i in 0..basis_len(order) {
            let dt = (tp[i] - tm[i]) / (2.0 * h);
            let dp = (pp[i] - pm[i]) / (2.0 * h);
            assert!((e.d_theta[i] - dt).abs() < 1e-6, "d_theta[{i}] {} vs {dt}", e.d_theta[i]);
            assert!((e.d_phi(i) - dp).abs() < 1e-6, "d_phi[{i}] {} vs {dp}", e.d_phi(i));
        }
    }
}

#[test]
fn phi_derivative_over_sin_is_finite_at_pole() {
    let mut e = ShEval::new(10);
    eval_sh_basis_into(0.0, 0.3, &mut e).unwrap();
    assert!(e.d_phi_over_sin.iter().all(|v| v.is_finite()));
    // Y_{1,-1} = sqrt(3/4pi) sin(theta) sin(phi); its phi-derivative over sin is sqrt(3/4pi) cos(phi)
    let i = ShIndex::new(1, -1).flat();
    assert!((e.d_phi_over_sin[i] - (3.0 / (4.0 * PI)).sqrt() * 0.3f64.cos()).abs() < 1e-12);
}

fn random_surface(rng: &mut ChaCha8Rng, mask: MaskKind) -> SurfaceModel {
    let mut s = SurfaceModel::sphere(10, mask, 50.0);
    for i in s.coeffs.free_indices().into_iter().skip(1) {
        let l = ShIndex::from_flat(i).l as f64;
        s.coeffs.values[i] = rng.random_range(-2.0..2.0) / (1.0 + l);
    }
    s
}

fn world_point(s: &SurfaceModel, theta: f64, phi: f64) -> Vector3<f64> {
    let r = eval_surface(s, theta, phi).unwrap().r;
    s.rotation() * direction_from_angles(theta, phi) * r
}

#[test]
fn normals_match_tangent_cross_product() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let h = 1e-6;
    for _ in 0..40 {
        let mut s = random_surface(&mut rng, MaskKind::Full);
        s.tilt_alpha = rng.random_range(-0.5..0.5);
        s.tilt_beta = rng.random_range(-0.5..0.5);
        let theta = rng.random_range(0.1..PI - 0.1);
        let phi = rng.random_range(-PI..PI);
        let pt = (world_point(&s, theta + h, phi) - world_point(&s, theta - h, phi)) / (2.0 * h);
        let pp = (world_point(&s, theta, phi + h) - world_point(&s, theta, phi - h)) / (2.0 * h);
        let mut fd = pt.cross(&pp).normalize();
        let outward = s.rotation() * direction_from_angles(theta, phi);
        if fd.dot(&outward) < 0.0 {
            fd = -fd;
        }
        let n = surface_normal(&s, theta, phi).unwrap();
        assert!((n - fd).norm() < 1e-6, "{n:?} vs {fd:?}");
        assert!(n.dot(&outward) > 0.0);
    }
}

#[test]
fn normal_is_continuous_through_pole() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let s = random_surface(&mut rng, MaskKind::Full);
    let at_pole = surface_normal(&s, 0.0, 0.0).unwrap();
    for phi in [0.0, 1.0, 2.5, -2.0] {
        let near = surface_normal(&s, 1e-7, phi).unwrap();
        assert!((near - at_pole).norm() < 1e-5);
    }
}

#[test]
fn quadrant_surfaces_are_mirror_symmetric() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let s = random_surface(&mut rng, MaskKind::Quadrant);
    for _ in 0..100 {
        let theta = rng.random_range(0.0..PI);
        let phi = rng.random_range(-PI..PI);
        let r = eval_surface(&s, theta, phi).unwrap().r;
        for mirrored in [-phi, PI - phi, PI + phi] {
            assert!((eval_surface(&s, theta, mirrored).unwrap().r - r).abs() < 1e-10);
        }
    }
}

#[test]
fn quadrant_mask_is_symmetric_subset() {
    let m = quadrant_mask(10);
    assert_eq!(m.len(), 36);
    for l in 0..=10usize {
        for mm in -(l as i32)..=(l as i32) {
            let idx = ShIndex::new(l, mm);
            assert_eq!(m.contains(idx), mm >= 0 && mm % 2 == 0, "{idx:?}");
        }
    }
}

proptest! {
    #[test]
    fn pack_unpack_round_trip(masked in prop::collection::vec(-100.0f64..100.0, 36)) {
        let m = quadrant_mask(10);
        let full = m.unpack(&masked);
        prop_assert_eq!(full.len(), 121);
        prop_assert_eq!(m.pack(&full), masked);
        for (i, v) in full.iter().enumerate() {
            if !m.contains(ShIndex::from_flat(i)) {
                prop_assert_eq!(*v, 0.0);
            }
        }
    }

    #[test]
    fn flat_index_round_trip(i in 0usize..10_000) {
        prop_assert_eq!(ShIndex::from_flat(i).flat(), i);
    }

    #[test]
    fn surface_json_round_trip(seed in 0u64..1000, quadrant in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask = if quadrant { MaskKind::Quadrant } else { MaskKind::Full };
        let mut s = random_surface(&mut rng, mask);
        if !quadrant {
            s.tilt_alpha = rng.random_range(-0.3..0.3);
        }
        let text = serde_json::to_string(&s).unwrap();
        let back: SurfaceModel = serde_json::from_str(&text).unwrap();
        prop_assert_eq!(back, s);
    }
}
