#![allow(dead_code)]

use pcno::operator::{model_backward, model_forward, GeomFeatures, ModelParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use pcno::geometry::{build_neighbor_lists, default_k, discretize_curve, make_single_curve_cloud, Curve, CurveFamily, PointCloud};

pub const CENTER: [f64; 2] = [2.5, 2.5];

pub fn circle(n: usize, r: f64) -> PointCloud {
    build_neighbor_lists(&discretize_curve(&Curve::circle(CENTER, r), n).unwrap(), default_k(2)).unwrap()
}

pub fn random_curve(seed: u64, n: usize) -> PointCloud {
    make_single_curve_cloud(seed, n, &CurveFamily::default()).unwrap()
}

/// Polar angle of each point about `CENTER`.
pub fn angles(cloud: &PointCloud) -> Vec<f64> {
    (0..cloud.len()).map(|i| (cloud.points[2 * i + 1] - CENTER[1]).atan2(cloud.points[2 * i] - CENTER[0])).collect()
}

pub fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den).sqrt()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn max_abs(a: &[f64]) -> f64 {
    a.iter().map(|x| x.abs()).fold(0.0, f64::max)
}

/// `∫_{Γ∩B_ε(x)} −(1/2π) ln‖x−y‖ f(y) dy` on a circle of radius `r` at the point of angle 0,
/// by Gauss quadrature after the substitution `φ = φ_ε s⁴` that smooths the log singularity.
pub fn single_layer_near_integral(r: f64, eps: f64, f: impl Fn(f64) -> f64) -> f64 {
    let phi_eps = 2.0 * (eps / (2.0 * r)).asin();
    let side = |sign: f64| {
        pcno::quadrature::composite_gauss(
            |s| {
                let phi = phi_eps * s.powi(4);
                let chord = 2.0 * r * (0.5 * phi).sin();
                -chord.ln() / (2.0 * std::f64::consts::PI) * f(sign * phi) * r * 4.0 * phi_eps * s.powi(3)
            },
            0.0,
            1.0,
            64,
            16,
        )
    };
    side(1.0) + side(-1.0)
}

fn fd_objective(mp: &ModelParams, geom: &GeomFeatures, a: &[f64], r: &[f64]) -> (f64, f64) {
    let (u, _) = model_forward(mp, geom, a).unwrap();
    (u.iter().zip(r).map(|(x, y)| x * y).sum(), u.iter().zip(r).map(|(x, y)| (x * y).abs()).sum())
}

/// Worst relative error of `model_backward` against central differences (step 1e-6) on
/// `count` random parameters, for the objective `Σ u·r` with random `r`.
///
/// Relative error is `|fd − g| / max(|fd|, |g|, noise/tol)`, where `noise = ε Σ|u_i r_i| / h`
/// bounds the rounding error of the difference quotient: gradients smaller than the
/// quotient can resolve only need to agree to within that noise.
pub fn fd_gradient_error(mp: &ModelParams, cloud: &PointCloud, a: &[f64], count: usize, seed: u64, tol: f64) -> f64 {
    let geom = GeomFeatures::new(cloud).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r: Vec<f64> = (0..cloud.len() * mp.config.d_u).map(|_| rng.random_range(-1.0..1.0)).collect();
    let (_, tape) = model_forward(mp, &geom, a).unwrap();
    let grad = model_backward(mp, &geom, &tape, &r).unwrap();
    let h = 1e-6;
    let mut worst = 0.0f64;
    for _ in 0..count {
        let idx = rng.random_range(0..mp.n_params());
        let mut plus = mp.clone();
        plus.theta[idx] += h;
        let mut minus = mp.clone();
        minus.theta[idx] -= h;
        let (jp, sp) = fd_objective(&plus, &geom, a, &r);
        let (jm, sm) = fd_objective(&minus, &geom, a, &r);
        let fd = (jp - jm) / (2.0 * h);
        let noise = f64::EPSILON * sp.max(sm) / h;
        let err = (fd - grad[idx]).abs() / fd.abs().max(grad[idx].abs()).max(noise / tol);
        worst = worst.max(err);
    }
    worst
}
