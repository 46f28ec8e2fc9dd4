mod common;

use common::*;
use pcno::geometry::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn unit_circle_geometry() {
    let cloud = circle(256, 1.0);
    for i in 0..256 {
        let p = cloud.point(i);
        let n = cloud.normal(i);
        let t = cloud.tangent(i);
        let radial = [p[0] - CENTER[0], p[1] - CENTER[1]];
        let r = radial[0].hypot(radial[1]);
        assert!((n[0] - radial[0] / r).abs() < 1e-12 && (n[1] - radial[1] / r).abs() < 1e-12);
        assert!((n[0].hypot(n[1]) - 1.0).abs() < 1e-14);
        assert!((n[0] * t[0] + n[1] * t[1]).abs() < 1e-14);
        assert!((cloud.curvature[i] - 1.0).abs() < 1e-2);
        assert!(cloud.weights[i] > 0.0);
    }
    assert!((cloud.total_weight() - 2.0 * std::f64::consts::PI).abs() < 1e-3);
}

#[test]
fn circle_curvature_is_inverse_radius() {
    for r in [0.5, 1.5, 2.0] {
        let cloud = circle(256, r);
        let worst = cloud.curvature.iter().map(|k| (k - 1.0 / r).abs()).fold(0.0, f64::max);
        assert!(worst < 1e-2 / r, "radius {r}: {worst}");
    }
}

#[test]
fn perimeter_converges_at_second_order() {
    let curve = generate_random_curve(5, &CurveFamily::default()).unwrap();
    let fine = discretize_curve(&curve, 4096).unwrap().total_weight();
    let e1 = (discretize_curve(&curve, 128).unwrap().total_weight() - fine).abs();
    let e2 = (discretize_curve(&curve, 256).unwrap().total_weight() - fine).abs();
    let ratio = e1 / e2;
    assert!((3.0..5.5).contains(&ratio), "ratio {ratio}");
}

#[test]
fn random_curves_are_star_shaped_and_inside_the_box() {
    let family = CurveFamily::default();
    for seed in 0..1000 {
        let c = generate_random_curve(seed, &family).unwrap();
        let (rmin, _) = c.radius_range(512);
        assert!(rmin > 0.0);
        assert!(c.box_clearance(BOX_SIZE, 512) >= BOX_MARGIN, "seed {seed}");
    }
}

#[test]
fn weighted_normals_sum_to_zero_on_closed_curves() {
    for seed in 0..5 {
        let cloud = random_curve(seed, 256);
        let s = cloud.weighted_normal_sum();
        assert!(s[0].abs() < 1e-12 && s[1].abs() < 1e-12, "{s:?}");
    }
}

#[test]
fn padded_points_have_zero_weight() {
    let cloud = circle(64, 1.0).pad(80).unwrap();
    assert_eq!(cloud.n_active(), 64);
    for i in 64..80 {
        assert!(!cloud.mask[i]);
        assert_eq!(cloud.weights[i], 0.0);
        assert!(cloud.neighbors[i].is_empty());
    }
    assert!(circle(64, 1.0).pad(32).is_err());
}

#[test]
fn two_fixed_circles_are_separated() {
    let a = Curve::circle([1.5, 2.5], 0.5);
    let b = Curve::circle([3.5, 2.5], 0.5);
    assert!((curve_distance(&a, &b, 512) - 1.0).abs() < 1e-9);
    let cloud = two_curve_cloud_from(&a, &b, 64).unwrap();
    assert_eq!(cloud.n_components(), 2);
}

#[test]
fn two_curve_draws_are_disjoint_and_neighbors_stay_on_their_curve() {
    let family = CurveFamily::two_curve();
    for seed in 0..500 {
        let [a, b] = generate_two_curves(seed, &family).unwrap();
        assert!(curve_distance(&a, &b, 256) > TWO_CURVE_GAP, "seed {seed}");
    }
    for seed in 0..5 {
        let cloud = make_two_curve_cloud(seed, 64, &family).unwrap();
        assert_eq!(cloud.n_components(), 2);
        for (i, list) in cloud.neighbors.iter().enumerate() {
            assert!(list.iter().all(|&j| cloud.component[j] == cloud.component[i]));
        }
    }
}

#[test]
fn uniform_circle_neighbors() {
    let cloud = build_neighbor_lists(&circle(64, 1.0), 4).unwrap();
    for i in 0..64 {
        let mut got = cloud.neighbors[i].clone();
        got.sort();
        let mut want: Vec<usize> = [1, 2, 62, 63].iter().map(|d| (i + d) % 64).collect();
        want.sort();
        assert_eq!(got, want, "point {i}");
    }
}

#[test]
fn neighbor_lists_match_brute_force_knn() {
    let cloud = random_curve(9, 200);
    let k = default_k(2);
    let dist = |i: usize, j: usize| {
        let (a, b) = (cloud.point(i), cloud.point(j));
        (a[0] - b[0]).hypot(a[1] - b[1])
    };
    for i in 0..cloud.len() {
        let list = &cloud.neighbors[i];
        assert_eq!(list.len(), k);
        assert!(!list.contains(&i));
        for w in list.windows(2) {
            assert!(dist(i, w[0]) <= dist(i, w[1]));
        }
        let mut all: Vec<f64> = (0..cloud.len()).filter(|&j| j != i).map(|j| dist(i, j)).collect();
        all.sort_by(f64::total_cmp);
        assert_eq!(dist(i, list[k - 1]), all[k - 1]);
    }
}

#[test]
fn gradient_of_linear_field_is_projected_direction() {
    let c = [0.7, -1.3];
    let cloud = random_curve(2, 256);
    let values: Vec<f64> = (0..cloud.len()).map(|i| 0.4 + c[0] * cloud.point(i)[0] + c[1] * cloud.point(i)[1]).collect();
    let g = tangential_gradient(&cloud, &values, 1).unwrap();
    let norm_c = c[0].hypot(c[1]);
    for i in 0..cloud.len() {
        let n = cloud.normal(i);
        let cn = c[0] * n[0] + c[1] * n[1];
        let want = [c[0] - cn * n[0], c[1] - cn * n[1]];
        let err = (g[2 * i] - want[0]).hypot(g[2 * i + 1] - want[1]);
        assert!(err <= 1e-2 * norm_c, "point {i}: {err}");
    }
}

#[test]
fn gradient_of_x1_on_unit_circle() {
    let cloud = circle(256, 1.0);
    let values: Vec<f64> = (0..256).map(|i| cloud.point(i)[0]).collect();
    let g = tangential_gradient(&cloud, &values, 1).unwrap();
    for i in 0..256 {
        let n = cloud.normal(i);
        let want = [1.0 - n[0] * n[0], -n[0] * n[1]];
        assert!((g[2 * i] - want[0]).abs() < 1e-2 && (g[2 * i + 1] - want[1]).abs() < 1e-2);
    }
}

#[test]
fn softsign_range() {
    assert_eq!(softsign_scalar(0.0), 0.0);
    assert_eq!(softsign_scalar(1.0), 0.5);
    let out = softsign(&[1e6, -1e6]);
    assert!((out[0] - 0.999999).abs() < 1e-9 && (out[1] + 0.999999).abs() < 1e-9);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..1000 {
        let x: f64 = rng.random_range(-1e8..1e8);
        assert!(softsign_scalar(x).abs() < 1.0);
    }
}

#[test]
fn grf_is_deterministic_and_centered() {
    let cloud = random_curve(1, 64);
    let spec = GrfSpec { seed: 42, ..GrfSpec::default() };
    assert_eq!(sample_grf(&cloud, &spec).unwrap(), sample_grf(&cloud, &spec).unwrap());

    let draws: Vec<f64> = (0..10_000).map(|s| sample_grf(&cloud, &GrfSpec { seed: s, ..GrfSpec::default() }).unwrap()[7]).collect();
    let mean = draws.iter().sum::<f64>() / draws.len() as f64;
    let var = draws.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (draws.len() - 1) as f64;
    assert!(mean.abs() <= 3.0 * var.sqrt() / 100.0, "mean {mean}, sd {}", var.sqrt());
}

#[test]
fn permuting_a_cloud_permutes_every_field() {
    let cloud = random_curve(4, 32);
    let perm: Vec<usize> = (0..32).rev().collect();
    let p = cloud.permute(&perm);
    for (i, &j) in perm.iter().enumerate() {
        assert_eq!(p.point(i), cloud.point(j));
        assert_eq!(p.weights[i], cloud.weights[j]);
        let mapped: Vec<usize> = cloud.neighbors[j].iter().map(|&m| perm.iter().position(|&x| x == m).unwrap()).collect();
        assert_eq!(p.neighbors[i], mapped);
    }
}
