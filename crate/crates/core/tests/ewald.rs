#![allow(clippy::needless_range_loop)]

mod common;

use common::*;
use num_complex::Complex64;
use pcno::ewald::*;
use pcno::geometry::{sample_grf, GrfSpec};
use pcno::kernels::{eval_displacement, KernelKind};
use pcno::panel2d::{apply_dense, assemble_dense};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;

const BOX: [f64; 2] = [5.0, 5.0];

fn grf(cloud: &pcno::geometry::PointCloud, seed: u64) -> Vec<f64> {
    sample_grf(cloud, &GrfSpec { seed, ..GrfSpec::default() }).unwrap()
}

#[test]
fn erf_split_partition_of_unity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..10_000 {
        let r: f64 = 10f64.powf(rng.random_range(-4.0..1.0));
        let d: f64 = 10f64.powf(rng.random_range(-3.0..0.0));
        let (long, short) = erf_split(r, d).unwrap();
        assert!(((long + short) * r - 1.0).abs() <= 1e-12, "r {r} δ {d}");
    }
    let (_, short) = erf_split(0.3, 0.3).unwrap();
    assert!((short * 0.3 - 0.157_299_207_050_285_1).abs() < 1e-12);
    let d = 0.1;
    let r = 5.0 * d;
    let (_, short) = erf_split(r, d).unwrap();
    assert!(short <= d / (PI.sqrt() * r * r) * (-25f64).exp());
}

#[test]
fn mollify_applies_gaussian_damping() {
    let raw = kernel_fourier_coeffs(KernelKind::SingleLayer2D, 3, 32, [0.5, 0.5]).unwrap();
    let m = mollify(&raw, 0.5);
    assert_eq!(m.coeff(0, 0, 0, 0), raw.coeff(0, 0, 0, 0));
    // ‖k‖² = 4 with period 1: factor e^(−2π²δ²‖k‖²) = e^(−2π²).
    let ratio = m.coeff(2, 0, 0, 0).re / raw.coeff(2, 0, 0, 0).re;
    assert!((ratio - (-2.0 * PI * PI).exp()).abs() < 1e-12 * ratio.abs().max(1e-300) + 1e-15);
    assert_eq!(mollify(&raw, 1e-300).coeffs, raw.coeffs);
}

#[test]
fn single_layer_coefficients_are_real_and_grid_converged() {
    let a = kernel_fourier_coeffs(KernelKind::SingleLayer2D, 4, 64, [0.5, 0.5]).unwrap();
    let b = kernel_fourier_coeffs(KernelKind::SingleLayer2D, 4, 128, [0.5, 0.5]).unwrap();
    assert!(a.coeffs.iter().all(|c| c.im.abs() < 1e-8));
    let worst = a.coeffs.iter().zip(&b.coeffs).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max);
    assert!(worst <= 1e-6, "{worst}");
}

#[test]
fn long_range_apply_examples() {
    let cloud = circle(64, 1.0);
    let mut sk = kernel_fourier_coeffs(KernelKind::SingleLayer2D, 2, 32, BOX).unwrap();
    assert!(long_range_apply(KernelKind::SingleLayer2D, &sk, &cloud, &vec![0.0; 64]).unwrap().iter().all(|&v| v == 0.0));

    // One real mode pair: coeffs(k₀) = coeffs(−k₀) = 1 gives 2 Re(e^(iφ(x)) Σ e^(−iφ(y)) w).
    sk.coeffs.fill(Complex64::new(0.0, 0.0));
    let (i0, i1) = (sk.mode_index(1, 2), sk.mode_index(-1, -2));
    sk.coeffs[i0] = Complex64::new(1.0, 0.0);
    sk.coeffs[i1] = Complex64::new(1.0, 0.0);
    let u = long_range_apply(KernelKind::SingleLayer2D, &sk, &cloud, &vec![1.0; 64]).unwrap();
    let phase = |x: &[f64]| PI * (x[0] / BOX[0] + 2.0 * x[1] / BOX[1]);
    let s: Complex64 = (0..64).map(|j| Complex64::from_polar(cloud.weights[j], -phase(cloud.point(j)))).sum();
    for i in 0..64 {
        let want = 2.0 * (Complex64::from_polar(1.0, phase(cloud.point(i))) * s).re;
        assert!((u[i] - want).abs() < 1e-12);
    }
}

#[test]
fn long_range_apply_matches_dense_double_sum() {
    let cloud = random_curve(3, 128);
    let f = grf(&cloud, 5);
    let cfg = EwaldConfig::for_box(BOX, 6);
    let sk = mollify(&kernel_fourier_coeffs(KernelKind::SingleLayer2D, 6, 48, BOX).unwrap(), cfg.delta);
    let u = long_range_apply(KernelKind::SingleLayer2D, &sk, &cloud, &f).unwrap();
    for i in 0..cloud.len() {
        let x = cloud.point(i);
        let mut want = 0.0;
        for j in 0..cloud.len() {
            let y = cloud.point(j);
            want += sk.eval(&[x[0] - y[0], x[1] - y[1]]).v[0] * f[j] * cloud.weights[j];
        }
        assert!((u[i] - want).abs() < 1e-10, "point {i}");
    }
}

#[test]
fn fast_apply_matches_dense_oracle() {
    let cfg = EwaldConfig::for_box(BOX, 32);
    for seed in 0..3 {
        let cloud = random_curve(seed, 512);
        let f = grf(&cloud, seed + 100);
        let fast = fast_apply(&cfg, KernelKind::SingleLayer2D, &cloud, &f).unwrap();
        let dense = apply_dense(&assemble_dense(KernelKind::SingleLayer2D, &cloud).unwrap(), &f).unwrap();
        let e = rel_l2(&fast, &dense);
        assert!(e <= 2e-2, "seed {seed}: {e}");
    }
}

#[test]
fn fast_apply_is_linear() {
    let cloud = random_curve(7, 256);
    let plan = FastApplyPlan::new(&EwaldConfig::for_box(BOX, 12), KernelKind::SingleLayer2D, &cloud).unwrap();
    let (f, g) = (grf(&cloud, 1), grf(&cloud, 2));
    let (a, b) = (0.7, -1.9);
    let h: Vec<f64> = f.iter().zip(&g).map(|(x, y)| a * x + b * y).collect();
    let (uf, ug, uh) = (plan.apply(&cloud, &f).unwrap(), plan.apply(&cloud, &g).unwrap(), plan.apply(&cloud, &h).unwrap());
    let comb: Vec<f64> = uf.iter().zip(&ug).map(|(x, y)| a * x + b * y).collect();
    assert!(max_abs_diff(&uh, &comb) <= 1e-12 * max_abs(&uh).max(1.0));
}

#[test]
fn fast_apply_is_consistent_under_translation() {
    let cfg = EwaldConfig::for_box(BOX, 24);
    let cloud = circle(256, 0.8);
    let mut shifted = cloud.clone();
    for i in 0..shifted.len() {
        shifted.points[2 * i] += 0.6;
        shifted.points[2 * i + 1] -= 0.4;
    }
    let f = grf(&cloud, 3);
    let dense = apply_dense(&assemble_dense(KernelKind::SingleLayer2D, &cloud).unwrap(), &f).unwrap();
    let u0 = fast_apply(&cfg, KernelKind::SingleLayer2D, &cloud, &f).unwrap();
    let u1 = fast_apply(&cfg, KernelKind::SingleLayer2D, &shifted, &f).unwrap();
    let (e0, e1) = (rel_l2(&u0, &dense), rel_l2(&u1, &dense));
    assert!(e0 <= 2e-2 && e1 <= 2e-2, "{e0} {e1}");
    assert!(rel_l2(&u1, &u0) <= e0 + e1);
}

#[test]
fn short_range_with_tiny_radius_is_the_self_term() {
    let cloud = circle(128, 1.0);
    let f = grf(&cloud, 4);
    let cfg = EwaldConfig::for_box(BOX, 8);
    let sk = mollify(&kernel_fourier_coeffs(KernelKind::SingleLayer2D, 8, 64, BOX).unwrap(), cfg.delta);
    let spacing = cloud.weights.iter().cloned().fold(f64::INFINITY, f64::min);
    let eps = 0.4 * spacing;
    assert_eq!(NearField::build(&cloud, eps).unwrap().n_pairs(), 0);
    let u = short_range_residual_apply(KernelKind::SingleLayer2D, &sk, &cloud, &f, eps).unwrap();
    let k0 = sk.eval(&[0.0, 0.0]).v[0];
    for i in 0..cloud.len() {
        let h = 0.5 * cloud.weights[i];
        let self_term = -(h * h.ln() - h) / PI * f[i] - k0 * f[i] * cloud.weights[i];
        assert!((u[i] - self_term).abs() < 1e-8, "point {i}: {}", u[i] - self_term);
    }
    let zero = short_range_residual_apply(KernelKind::SingleLayer2D, &sk, &cloud, &vec![0.0; 128], eps).unwrap();
    assert!(zero.iter().all(|&v| v == 0.0));
    assert!(short_range_residual_apply(KernelKind::SingleLayer2D, &sk, &cloud, &f, 6.0).is_err());
}

#[test]
fn short_residual_is_negligible_outside_the_near_field() {
    let cfg = EwaldConfig::for_box(BOX, 32);
    let sk = mollify(&kernel_fourier_coeffs(KernelKind::SingleLayer2D, 32, default_grid_n(32), BOX).unwrap(), cfg.delta);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let zero = [0.0; 2];
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let rho: f64 = rng.random_range(cfg.eps..0.6 * BOX[0]);
        let t: f64 = rng.random_range(0.0..2.0 * PI);
        let r = [rho * t.cos(), rho * t.sin()];
        let full = eval_displacement(KernelKind::SingleLayer2D, &r, &zero, &zero).v[0];
        worst = worst.max((full - sk.eval(&r).v[0]).abs());
    }
    assert!(worst <= 1e-4, "{worst}");
}

#[test]
fn fast_apply_work_is_linear_in_n() {
    let cfg = EwaldConfig::for_box(BOX, 32);
    let mut per_point = Vec::new();
    for n in [256, 512, 1024] {
        let cloud = circle(n, 1.0);
        let plan = FastApplyPlan::new(&cfg, KernelKind::SingleLayer2D, &cloud).unwrap();
        plan.apply(&cloud, &vec![1.0; n]).unwrap();
        per_point.push(plan.ops() as f64 / n as f64);
    }
    let (lo, hi) = per_point.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &x| (a.min(x), b.max(x)));
    assert!(hi / lo <= 1.2, "{per_point:?}");
}

#[test]
fn decomposition_error_examples() {
    let rows = decomposition_sweep(KernelKind::SingleLayer2D, &[8, 16, 32], 0.9, 0.01, 1.0).unwrap();
    for w in rows.windows(2) {
        assert!(w[0].l1_error / w[1].l1_error >= 1.7, "{rows:?}");
    }
    let csv = sweep_csv(&rows);
    assert!(csv.starts_with("kernel,p,delta,epsilon,l1_error\nsingle_layer_2d,8,"));
    assert_eq!(csv.lines().count(), 4);

    // Fixed p: the error grows as the near-field radius shrinks.
    let base = EwaldConfig::theorem(8, 0.9, 0.01, 1.0, [0.5, 0.5]);
    let raw = kernel_fourier_coeffs(KernelKind::SingleLayer2D, 8, default_grid_n(8), [0.5, 0.5]).unwrap();
    let zero = [0.0; 2];
    let errs: Vec<f64> = [0.02, 0.01, 0.005]
        .iter()
        .map(|&eps| decomposition_error_with(|r| eval_displacement(KernelKind::SingleLayer2D, r, &zero, &zero), &raw, base.delta, eps))
        .collect();
    assert!(errs.windows(2).all(|w| w[1] >= w[0]), "{errs:?}");
}

#[test]
fn bandlimited_kernel_is_represented_exactly() {
    let l = [0.5, 0.5];
    let kernel = |r: &[f64]| {
        let v = 0.3 + (2.0 * PI * r[0]).cos() * 0.5 + (2.0 * PI * (r[0] + 2.0 * r[1])).sin() * 0.2;
        pcno::kernels::Block::scalar(v)
    };
    let mut raw = kernel_fourier_coeffs(KernelKind::SingleLayer2D, 2, 32, l).unwrap();
    raw.coeffs.fill(Complex64::new(0.0, 0.0));
    let set = |raw: &mut SpectralKernel, k1: i64, k2: i64, c: Complex64| {
        let i = raw.mode_index(k1, k2);
        raw.coeffs[i] = c;
    };
    set(&mut raw, 0, 0, Complex64::new(0.3, 0.0));
    set(&mut raw, 1, 0, Complex64::new(0.25, 0.0));
    set(&mut raw, -1, 0, Complex64::new(0.25, 0.0));
    set(&mut raw, 1, 2, Complex64::new(0.0, -0.1));
    set(&mut raw, -1, -2, Complex64::new(0.0, 0.1));
    let err = decomposition_error_with(kernel, &raw, 1e-12, 1e-3);
    assert!(err <= 1e-10, "{err}");
}
