#![allow(clippy::needless_range_loop)]

mod common;

use common::*;
use pcno::dataset::{generate_curve_dataset, CurveDatasetConfig};
use pcno::geometry::{discretize_curve, Curve};
use pcno::kernels::KernelKind;
use pcno::panel2d::*;
use std::f64::consts::PI;

#[test]
fn panel_integral_examples() {
    let panel = Panel::from_endpoints([0.0, 0.0], [2.0, 0.0]);
    let v = panel_integral(KernelKind::SingleLayer2D, &panel, &[1.0, 0.0], None).unwrap().get(0, 0);
    assert!((v - 1.0 / PI).abs() < 1e-14);
    for x in [[-0.5, 0.0], [0.7, 0.0], [3.0, 0.0]] {
        let v = panel_integral(KernelKind::DoubleLayer2D, &panel, &x, None).unwrap().get(0, 0);
        assert_eq!(v, 0.0);
    }
    let b = panel_integral(KernelKind::ModifiedDoubleLayer2D, &panel, &[1.0, 0.4], Some(&[0.0, 1.0])).unwrap();
    assert!(b.get(0, 0).abs() < 1e-15);
}

#[test]
fn gauss_identity_on_random_curves() {
    for seed in 0..5 {
        let cloud = random_curve(seed, 512);
        let op = assemble_dense(KernelKind::DoubleLayer2D, &cloud).unwrap();
        for r in 0..op.rows() {
            let s: f64 = (0..op.cols()).map(|c| op.entry(r, c)).sum();
            assert!((s + 0.5).abs() < 1e-3, "seed {seed} row {r}: {s}");
        }
    }
}

#[test]
fn uniform_density_on_radius_two_circle() {
    let cloud = circle(1024, 2.0);
    let u = apply_dense(&assemble_dense(KernelKind::SingleLayer2D, &cloud).unwrap(), &vec![1.0; 1024]).unwrap();
    let want = -2.0 * 2f64.ln();
    assert!(u.iter().all(|v| (v - want).abs() < 1e-3));
}

#[test]
fn adjoint_double_layer_rows_are_constant_on_a_circle() {
    let (r, n) = (1.5, 256);
    let cloud = circle(n, r);
    let op = assemble_dense(KernelKind::AdjointDoubleLayer2D, &cloud).unwrap();
    let sum0: f64 = (0..n).map(|j| op.entry(0, j)).sum();
    for i in 0..n {
        let sum: f64 = (0..n).map(|j| op.entry(i, j)).sum();
        assert!((sum - sum0).abs() < 1e-12);
        for j in 0..n {
            // Collocation points sit on the chords, so only well-separated panels see the circle value.
            let gap = (i as isize - j as isize).rem_euclid(n as isize).min((j as isize - i as isize).rem_euclid(n as isize));
            if gap >= n as isize / 8 {
                let want = -cloud.weights[j] / (4.0 * PI * r);
                assert!((op.entry(i, j) - want).abs() < 1e-3 * want.abs(), "{i} {j}");
            }
        }
    }
}

#[test]
fn single_layer_circle_eigenfunctions() {
    let cloud = circle(512, 1.0);
    let th = angles(&cloud);
    let op = assemble_dense(KernelKind::SingleLayer2D, &cloud).unwrap();
    for k in 1..=3 {
        let f: Vec<f64> = th.iter().map(|t| (k as f64 * t).cos()).collect();
        let want: Vec<f64> = f.iter().map(|v| v / (2.0 * k as f64)).collect();
        let e = rel_l2(&apply_dense(&op, &f).unwrap(), &want);
        assert!(e <= 1e-2, "k = {k}: {e}");
    }
}

#[test]
fn apply_dense_basic_identities() {
    let cloud = random_curve(1, 64);
    let op = assemble_dense(KernelKind::Stokeslet2D, &cloud).unwrap();
    assert!(apply_dense(&op, &vec![0.0; 128]).unwrap().iter().all(|&v| v == 0.0));
    let mut e = vec![0.0; 128];
    e[37] = 1.0;
    let col = apply_dense(&op, &e).unwrap();
    for r in 0..128 {
        assert_eq!(col[r], op.entry(r, 37));
    }
    assert!(apply_dense(&op, &e[..100]).is_err());
}

#[test]
fn exterior_neumann_on_the_unit_circle() {
    let cloud = circle(512, 1.0);
    let th = angles(&cloud);
    let f: Vec<f64> = th.iter().map(|t| t.cos()).collect();
    let sol = solve_exterior_neumann(&cloud, &f).unwrap();
    let sigma: Vec<f64> = th.iter().map(|t| -2.0 * t.cos()).collect();
    let phi: Vec<f64> = th.iter().map(|t| -t.cos()).collect();
    assert!(rel_l2(&sol.sigma, &sigma) <= 1e-2);
    assert!(rel_l2(&sol.phi, &phi) <= 1e-2);

    let f2: Vec<f64> = th.iter().map(|t| (2.0 * t).cos()).collect();
    let sol = solve_exterior_neumann(&cloud, &f2).unwrap();
    let phi2: Vec<f64> = th.iter().map(|t| -(2.0 * t).cos() / 2.0).collect();
    assert!(rel_l2(&sol.phi, &phi2) <= 1e-2);

    let zero = solve_exterior_neumann(&cloud, &vec![0.0; 512]).unwrap();
    assert!(zero.sigma.iter().chain(&zero.phi).all(|&v| v == 0.0));
}

#[test]
fn exterior_neumann_on_an_off_center_circle() {
    let cloud = discretize_curve(&Curve::circle([1.9, 3.1], 0.7), 512).unwrap();
    let th: Vec<f64> = (0..512).map(|i| (cloud.points[2 * i + 1] - 3.1).atan2(cloud.points[2 * i] - 1.9)).collect();
    let f: Vec<f64> = th.iter().map(|t| t.sin()).collect();
    let sol = solve_exterior_neumann(&cloud, &f).unwrap();
    // Φ = −R sin θ / r on the exterior, so Φ|∂Ω = −R sin θ.
    let phi: Vec<f64> = th.iter().map(|t| -0.7 * t.sin()).collect();
    assert!(rel_l2(&sol.phi, &phi) <= 1e-2);
}

#[test]
fn neumann_dataset_is_demeaned_deterministic_and_reproducible() {
    let ds = neumann_to_dirichlet_dataset(4, 128, 11).unwrap();
    assert_eq!(ds, neumann_to_dirichlet_dataset(4, 128, 11).unwrap());
    for s in &ds.samples {
        let norm = s.a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mean: f64 = s.a.iter().zip(&s.cloud.weights).map(|(a, w)| a * w).sum();
        assert!(mean.abs() <= 1e-10 * norm);
        let again = solve_exterior_neumann(&s.cloud, &s.a).unwrap();
        assert_eq!(again.phi, s.u);
    }
}

#[test]
fn kernel_dataset_matches_dense_apply() {
    let ds = generate_curve_dataset(&CurveDatasetConfig::kernel(KernelKind::ModifiedDoubleLayer2D, 3, 96, 2)).unwrap();
    assert_eq!((ds.d_a, ds.d_u), (1, 2));
    for s in &ds.samples {
        let u = apply_dense(&assemble_dense(KernelKind::ModifiedDoubleLayer2D, &s.cloud).unwrap(), &s.a).unwrap();
        assert_eq!(u, s.u);
    }
}
