mod common;

use common::*;
use num_complex::Complex64;
use pcno::ewald::{long_range_apply, SpectralKernel};
use pcno::geometry::{discretize_curve, Curve, PointCloud};
use pcno::kernels::KernelKind;
use pcno::operator::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn randn(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn set_identity(mp: &mut ModelParams, b: &ParamBlock) {
    let blk = mp.block_mut(b);
    blk.fill(0.0);
    for r in 0..b.rows.min(b.cols) {
        blk[r * b.cols + r] = 1.0;
    }
}

fn zero_block(mp: &mut ModelParams, b: &Option<ParamBlock>) {
    if let Some(b) = b {
        mp.block_mut(b).fill(0.0);
    }
}

#[test]
fn features_stack_input_points_and_normals() {
    let cloud = circle(32, 1.0).pad(40).unwrap();
    let geom = GeomFeatures::new(&cloud).unwrap();
    let a: Vec<f64> = (0..40).map(|i| i as f64).collect();
    let f = build_features(&geom, &a, 1).unwrap();
    assert_eq!(f.len(), 40 * 5);
    for i in 0..32 {
        assert_eq!(f[i * 5], i as f64);
        assert_eq!(&f[i * 5 + 1..i * 5 + 3], cloud.point(i));
        assert_eq!(&f[i * 5 + 3..i * 5 + 5], cloud.normal(i));
    }
    assert!(f[32 * 5..].iter().all(|&v| v == 0.0));
    assert!(build_features(&geom, &a[..39], 1).is_err());
}

#[test]
fn half_mode_set_covers_each_pair_once() {
    for (p, d) in [(3, 2), (2, 3)] {
        let modes = half_modes(p, d);
        let full = (2 * p + 1).pow(d as u32);
        assert_eq!(modes.len(), full.div_ceil(2));
        for (i, k) in modes.iter().enumerate() {
            for k2 in &modes[i + 1..] {
                let neg: Vec<i64> = k2[..d].iter().map(|v| -v).collect();
                assert_ne!(&k[..d], &k2[..d]);
                assert_ne!(&k[..d], &neg[..]);
            }
        }
    }
}

#[test]
fn zero_weights_give_zero_long_range_and_identity_layer() {
    let cloud = circle(48, 1.0);
    let geom = GeomFeatures::new(&cloud).unwrap();
    let mp = ModelParams::zeros(ModelConfig::deep(2, 1, 1, 4, 1, 3)).unwrap();
    let f = randn(48 * 4, 1);
    assert!(k_long_apply(&mp.layer(0), &geom, &f).unwrap().iter().all(|&v| v == 0.0));
    assert!(k_short_apply(&mp.layer(0), &geom, &vec![0.0; 48 * 4]).unwrap().iter().all(|&v| v == 0.0));
    assert_eq!(layer_forward(&mp.layer(0), &geom, &f).unwrap(), f);
}

#[test]
fn identity_factorization_matches_ewald_long_range_apply() {
    let cloud = random_curve(3, 96);
    let geom = GeomFeatures::new(&cloud).unwrap();
    let p = 4;
    let mut mp = ModelParams::zeros(ModelConfig::deep(2, 1, 1, 1, 1, p)).unwrap();
    let lay = mp.layout.layers[0].clone();
    set_identity(&mut mp, lay.w1.as_ref().unwrap());
    set_identity(&mut mp, lay.w3.as_ref().unwrap());
    let k0 = [2i64, -1];
    let c0 = Complex64::new(0.7, -0.3);
    mp.set_fourier_mode(&lay.fourier, &k0, &[c0]).unwrap();

    let side = 2 * p + 1;
    let mut sk = SpectralKernel {
        kind: KernelKind::SingleLayer2D,
        p,
        l: [DEFAULT_BOX_2D; 2],
        rows: 1,
        cols: 1,
        delta: 0.0,
        coeffs: vec![Complex64::new(0.0, 0.0); side * side],
    };
    let i0 = sk.mode_index(k0[0], k0[1]);
    let i1 = sk.mode_index(-k0[0], -k0[1]);
    sk.coeffs[i0] = c0;
    sk.coeffs[i1] = c0.conj();

    let f: Vec<f64> = angles(&cloud).iter().map(|t| (2.0 * t).cos() + 0.3).collect();
    let ours = k_long_apply(&mp.layer(0), &geom, &f).unwrap();
    let reference = long_range_apply(KernelKind::SingleLayer2D, &sk, &cloud, &f).unwrap();
    assert!(max_abs(&reference) > 1e-3);
    assert!(max_abs_diff(&ours, &reference) <= 1e-12 * max_abs(&reference).max(1.0));
}

#[test]
fn conjugate_symmetric_weights_give_real_output() {
    let cloud = random_curve(5, 64);
    let geom = GeomFeatures::new(&cloud).unwrap();
    let mut cfg = ModelConfig::deep(2, 1, 1, 3, 1, 3);
    cfg.mode = DomainMode::Volume;
    let mp = ModelParams::init(cfg, 11).unwrap();
    let w = 3;
    let f = randn(64 * w, 2);
    let ours = k_long_apply(&mp.layer(0), &geom, &f).unwrap();

    // Full complex sum over every mode, independent of the half-spectrum code.
    let spectrum = mp.full_spectrum(&mp.layout.layers[0].fourier);
    let mut worst_im = 0.0f64;
    let mut worst_re = 0.0f64;
    for i in 0..64 {
        let x = cloud.point(i);
        for o in 0..w {
            let mut acc = Complex64::new(0.0, 0.0);
            for (k, wk) in &spectrum {
                for c in 0..w {
                    let mut s = Complex64::new(0.0, 0.0);
                    for j in 0..64 {
                        let y = cloud.point(j);
                        let ph = std::f64::consts::PI * (k[0] as f64 * (x[0] - y[0]) + k[1] as f64 * (x[1] - y[1])) / DEFAULT_BOX_2D;
                        s += Complex64::from_polar(1.0, ph) * f[j * w + c] * cloud.weights[j];
                    }
                    acc += wk[o * w + c] * s;
                }
            }
            worst_im = worst_im.max(acc.im.abs());
            worst_re = worst_re.max((acc.re - ours[i * w + o]).abs());
        }
    }
    assert!(worst_im <= 1e-12, "imaginary residue {worst_im}");
    assert!(worst_re <= 1e-11, "real part mismatch {worst_re}");
}

#[test]
fn short_range_reductions() {
    let cloud = random_curve(8, 64);
    let geom = GeomFeatures::new(&cloud).unwrap();
    let mut mp = ModelParams::init(ModelConfig::deep(2, 1, 1, 4, 1, 2), 3).unwrap();
    let lay = mp.layout.layers[0].clone();
    let f = randn(64 * 4, 4);
    assert!(k_short_apply(&mp.layer(0), &geom, &vec![0.0; 256]).unwrap().iter().all(|&v| v == 0.0));
    mp.block_mut(&lay.b).copy_from_slice(&[0.1, -0.2, 0.3, 0.0]);
    mp.block_mut(&lay.wg1).fill(0.0);
    zero_block(&mut mp, &lay.wg2);
    let out = k_short_apply(&mp.layer(0), &geom, &f).unwrap();
    let wl = mp.block(&lay.wl).to_vec();
    let b = mp.block(&lay.b).to_vec();
    for i in 0..64 {
        for r in 0..4 {
            let expect: f64 = b[r] + (0..4).map(|c| wl[r * 4 + c] * f[i * 4 + c]).sum::<f64>();
            assert!((out[i * 4 + r] - expect).abs() < 1e-14);
        }
    }
}

#[test]
fn flat_segment_normal_features_are_constant() {
    // Straight open segment: interior points share n and have ∇_D n = 0.
    let n = 40;
    let mut cloud = PointCloud {
        dims: 2,
        points: (0..n).flat_map(|i| [1.0 + 0.05 * i as f64, 2.0]).collect(),
        normals: (0..n).flat_map(|_| [0.0, -1.0]).collect(),
        tangents: (0..n).flat_map(|_| [1.0, 0.0]).collect(),
        weights: vec![0.05; n],
        curvature: vec![0.0; n],
        mask: vec![true; n],
        component: vec![0; n],
        neighbors: vec![Vec::new(); n],
    };
    cloud = pcno::geometry::build_neighbor_lists(&cloud, 6).unwrap();
    let geom = GeomFeatures::new(&cloud).unwrap();
    let mut mp = ModelParams::init(ModelConfig::deep(2, 1, 1, 3, 1, 2), 9).unwrap();
    let lay = mp.layout.layers[0].clone();
    mp.block_mut(&lay.wl).fill(0.0);
    mp.block_mut(&lay.wg1).fill(0.0);
    mp.block_mut(lay.wg4.as_ref().unwrap()).fill(0.0);
    set_identity(&mut mp, lay.wg4.as_ref().unwrap());
    let f = vec![1.0; n * 3];
    let out = k_short_apply(&mp.layer(0), &geom, &f).unwrap();
    for i in 5..n - 5 {
        for r in 0..3 {
            assert!((out[i * 3 + r] - out[5 * 3 + r]).abs() < 1e-12);
        }
    }
}

#[test]
fn linear_layer_has_no_activation() {
    let cloud = random_curve(2, 64);
    let geom = GeomFeatures::new(&cloud).unwrap();
    let mut cfg = ModelConfig::linear(2, 1, 2, 3);
    cfg.source_normal = true;
    cfg.target_normal = true;
    let mp = ModelParams::init(cfg, 5).unwrap();
    let f = randn(64 * 2, 6);
    let lp = mp.layer(0);
    let long = k_long_apply(&lp, &geom, &f).unwrap();
    let short = k_short_apply(&lp, &geom, &f).unwrap();
    let out = layer_forward(&lp, &geom, &f).unwrap();
    for i in 0..f.len() {
        assert_eq!(out[i], f[i] + (long[i] + short[i]));
    }
}

#[test]
fn linear_model_equals_its_regression_features() {
    let cloud = random_curve(4, 80).pad(90).unwrap();
    let geom = GeomFeatures::new(&cloud).unwrap();
    let mut cfg = ModelConfig::linear(2, 1, 2, 3);
    cfg.source_normal = true;
    cfg.target_normal = true;
    let mut mp = ModelParams::init(cfg, 7).unwrap();
    for (i, v) in mp.theta.iter_mut().enumerate() {
        *v += 0.01 * ((i % 7) as f64 - 3.0);
    }
    let mut a = randn(90, 8);
    a[80..].fill(0.0);
    let (u, _) = model_forward(&mp, &geom, &a).unwrap();
    let feats = linear_features(&mp, &geom, &a).unwrap();
    let mut worst = 0.0f64;
    for i in 0..90 {
        for o in 0..2 {
            let mut v = feats.offset[i * 2 + o];
            for q in 0..feats.q {
                v += feats.phi[i * feats.q + q] * mp.theta[feats.base[q] + o * feats.stride[q]];
            }
            worst = worst.max((v - u[i * 2 + o]).abs());
        }
    }
    assert!(worst <= 1e-12 * max_abs(&u), "worst {worst}");
    assert!(u[160..].iter().all(|&v| v == 0.0));
}

#[test]
fn zero_model_outputs_projection_bias() {
    let cloud = circle(32, 1.0).pad(36).unwrap();
    let geom = GeomFeatures::new(&cloud).unwrap();
    let mut mp = ModelParams::zeros(ModelConfig::deep(2, 1, 2, 4, 2, 2)).unwrap();
    let pb2 = mp.layout.proj.as_ref().unwrap()[3].clone();
    mp.block_mut(&pb2).copy_from_slice(&[0.25, -1.5]);
    let (u, _) = model_forward(&mp, &geom, &vec![0.0; 36]).unwrap();
    for i in 0..32 {
        assert_eq!(&u[2 * i..2 * i + 2], &[0.25, -1.5]);
    }
    assert!(u[64..].iter().all(|&v| v == 0.0));
}

fn grf_input(cloud: &PointCloud) -> Vec<f64> {
    angles(cloud).iter().map(|t| t.cos() + 0.5 * (3.0 * t).sin()).collect()
}

#[test]
fn permutation_equivariance_is_exact() {
    let cloud = random_curve(12, 96);
    let mp = ModelParams::init(ModelConfig::deep(2, 1, 1, 8, 2, 4), 1).unwrap();
    let a = grf_input(&cloud);
    let (u, _) = model_forward(&mp, &GeomFeatures::new(&cloud).unwrap(), &a).unwrap();
    let mut perm: Vec<usize> = (0..96).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for i in (1..96).rev() {
        perm.swap(i, rng.random_range(0..=i));
    }
    let pc = cloud.permute(&perm);
    let pa: Vec<f64> = perm.iter().map(|&j| a[j]).collect();
    let (pu, _) = model_forward(&mp, &GeomFeatures::new(&pc).unwrap(), &pa).unwrap();
    for i in 0..96 {
        assert_eq!(pu[i].to_bits(), u[perm[i]].to_bits(), "point {i}");
    }
}

#[test]
fn padding_does_not_change_active_outputs() {
    let cloud = random_curve(13, 64);
    let mp = ModelParams::init(ModelConfig::deep(2, 1, 1, 6, 2, 3), 2).unwrap();
    let a = grf_input(&cloud);
    let (u, _) = model_forward(&mp, &GeomFeatures::new(&cloud).unwrap(), &a).unwrap();
    let padded = cloud.pad(80).unwrap();
    let mut pa = a.clone();
    pa.resize(80, 0.0);
    let (pu, tape) = model_forward(&mp, &GeomFeatures::new(&padded).unwrap(), &pa).unwrap();
    assert_eq!(&pu[..64], &u[..]);
    assert!(pu[64..].iter().all(|&v| v == 0.0));
    assert_eq!(tape.output, pu);
}

fn fd_check(mp: &ModelParams, cloud: &PointCloud, count: usize, seed: u64, tol: f64) -> f64 {
    let a: Vec<f64> = grf_input(cloud).iter().flat_map(|&v| std::iter::repeat_n(v, mp.config.d_a)).collect();
    let worst = fd_gradient_error(mp, cloud, &a, count, seed, tol);
    assert!(worst <= tol, "max relative error {worst}");
    worst
}

#[test]
fn backward_matches_finite_differences() {
    let cloud = random_curve(21, 48);
    let mp = ModelParams::init(ModelConfig::deep(2, 1, 2, 6, 2, 3), 4).unwrap();
    fd_check(&mp, &cloud, 60, 9, 1e-5);
}

#[test]
fn backward_matches_finite_differences_in_volume_mode() {
    let cloud = random_curve(22, 40);
    let mut cfg = ModelConfig::deep(2, 2, 1, 4, 2, 2);
    cfg.mode = DomainMode::Volume;
    let mp = ModelParams::init(cfg, 5).unwrap();
    fd_check(&mp, &cloud, 40, 3, 1e-5);
}

#[test]
fn linear_backward_matches_finite_differences() {
    let cloud = random_curve(23, 48);
    let mut cfg = ModelConfig::linear(2, 1, 2, 3);
    cfg.source_normal = true;
    cfg.target_normal = true;
    let mp = ModelParams::init(cfg, 6).unwrap();
    fd_check(&mp, &cloud, 40, 5, 1e-6);
}

#[test]
fn unused_blocks_get_zero_gradient_and_backward_is_linear() {
    let cloud = random_curve(24, 48);
    let geom = GeomFeatures::new(&cloud).unwrap();
    let mut mp = ModelParams::init(ModelConfig::deep(2, 1, 1, 4, 2, 2), 8).unwrap();
    let lay = mp.layout.layers[1].clone();
    zero_block(&mut mp, &lay.wg2);
    let a = grf_input(&cloud);
    let r = randn(48, 1);
    let (_, tape) = model_forward(&mp, &geom, &a).unwrap();
    let g = model_backward(&mp, &geom, &tape, &r).unwrap();
    for b in [lay.wg3.as_ref().unwrap(), lay.wg4.as_ref().unwrap()] {
        assert!(g[b.range()].iter().all(|&v| v == 0.0), "{}", b.name);
    }
    let r3: Vec<f64> = r.iter().map(|v| 3.0 * v).collect();
    let g3 = model_backward(&mp, &geom, &tape, &r3).unwrap();
    for (x, y) in g.iter().zip(&g3) {
        assert!((3.0 * x - y).abs() <= 1e-12 * y.abs().max(1e-300) + 1e-300);
    }
    let other = circle(40, 1.0);
    let og = GeomFeatures::new(&other).unwrap();
    assert!(model_backward(&mp, &og, &tape, &r[..40]).is_err());
}

#[test]
fn refinement_changes_layer_output_at_first_order() {
    let mp = ModelParams::init(ModelConfig::deep(2, 1, 1, 4, 1, 3), 13).unwrap();
    let curve = Curve::circle(CENTER, 1.0);
    // Layer output at the parameter midpoints of N panels; for 2N panels the two
    // children of each panel are averaged.
    let eval = |n: usize| -> Vec<f64> {
        let cloud = pcno::geometry::build_neighbor_lists(&discretize_curve(&curve, n).unwrap(), 6).unwrap();
        let geom = GeomFeatures::new(&cloud).unwrap();
        let f: Vec<f64> = angles(&cloud).iter().flat_map(|t| [t.cos(), t.sin(), (2.0 * t).cos(), 1.0]).collect();
        layer_forward(&mp.layer(0), &geom, &f).unwrap()
    };
    let coarse_vs_fine = |n: usize| -> f64 {
        let a = eval(n);
        let b = eval(2 * n);
        let mut worst = 0.0f64;
        for i in 0..n {
            for c in 0..4 {
                let avg = 0.5 * (b[(2 * i) * 4 + c] + b[(2 * i + 1) * 4 + c]);
                worst = worst.max((a[i * 4 + c] - avg).abs());
            }
        }
        worst
    };
    let e1 = coarse_vs_fine(64);
    let e2 = coarse_vs_fine(128);
    assert!(e2 < e1 && e1 / e2 >= 1.6, "e(64) = {e1}, e(128) = {e2}");
}
