//! Layer-potential kernels, their short-range asymptotics and regularity checks.

use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum KernelKind {
    #[serde(rename = "single_layer_2d")]
    SingleLayer2D,
    #[serde(rename = "double_layer_2d")]
    DoubleLayer2D,
    #[serde(rename = "modified_double_layer_2d")]
    ModifiedDoubleLayer2D,
    #[serde(rename = "adjoint_double_layer_2d")]
    AdjointDoubleLayer2D,
    #[serde(rename = "stokeslet_2d")]
    Stokeslet2D,
    #[serde(rename = "single_layer_3d")]
    SingleLayer3D,
    #[serde(rename = "double_layer_3d")]
    DoubleLayer3D,
    #[serde(rename = "modified_double_layer_3d")]
    ModifiedDoubleLayer3D,
    #[serde(rename = "adjoint_double_layer_3d")]
    AdjointDoubleLayer3D,
    #[serde(rename = "stokeslet_3d")]
    Stokeslet3D,
}

use KernelKind::*;

impl KernelKind {
    pub const ALL: [KernelKind; 10] = [
        SingleLayer2D,
        DoubleLayer2D,
        ModifiedDoubleLayer2D,
        AdjointDoubleLayer2D,
        Stokeslet2D,
        SingleLayer3D,
        DoubleLayer3D,
        ModifiedDoubleLayer3D,
        AdjointDoubleLayer3D,
        Stokeslet3D,
    ];

    pub fn dims(self) -> usize {
        match self {
            SingleLayer2D | DoubleLayer2D | ModifiedDoubleLayer2D | AdjointDoubleLayer2D | Stokeslet2D => 2,
            _ => 3,
        }
    }

    /// Input channels `d_f`.
    pub fn d_f(self) -> usize {
        match self {
            Stokeslet2D | Stokeslet3D => self.dims(),
            _ => 1,
        }
    }

    /// Output channels `d_u`.
    pub fn d_u(self) -> usize {
        match self {
            Stokeslet2D | Stokeslet3D | ModifiedDoubleLayer2D | ModifiedDoubleLayer3D => self.dims(),
            _ => 1,
        }
    }

    pub fn needs_ny(self) -> bool {
        matches!(self, DoubleLayer2D | DoubleLayer3D)
    }

    pub fn needs_nx(self) -> bool {
        matches!(self, AdjointDoubleLayer2D | AdjointDoubleLayer3D)
    }

    pub fn name(self) -> &'static str {
        match self {
            SingleLayer2D => "single_layer_2d",
            DoubleLayer2D => "double_layer_2d",
            ModifiedDoubleLayer2D => "modified_double_layer_2d",
            AdjointDoubleLayer2D => "adjoint_double_layer_2d",
            Stokeslet2D => "stokeslet_2d",
            SingleLayer3D => "single_layer_3d",
            DoubleLayer3D => "double_layer_3d",
            ModifiedDoubleLayer3D => "modified_double_layer_3d",
            AdjointDoubleLayer3D => "adjoint_double_layer_3d",
            Stokeslet3D => "stokeslet_3d",
        }
    }
}

impl fmt::Display for KernelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for KernelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        KernelKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown kernel '{s}'")))
    }
}

/// Kernel value: a `rows × cols` matrix stored row-major in a fixed buffer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Block {
    pub rows: usize,
    pub cols: usize,
    pub v: [f64; 9],
}

impl Block {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Block { rows, cols, v: [0.0; 9] }
    }

    pub fn scalar(x: f64) -> Self {
        let mut b = Block::zeros(1, 1);
        b.v[0] = x;
        b
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.v[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, x: f64) {
        self.v[r * self.cols + c] = x;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.v[..self.rows * self.cols]
    }

    pub fn scale(mut self, s: f64) -> Self {
        self.v.iter_mut().for_each(|x| *x *= s);
        self
    }

    pub fn plus(mut self, other: &Block) -> Self {
        for (a, b) in self.v.iter_mut().zip(other.v) {
            *a += b;
        }
        self
    }

    pub fn frobenius(&self) -> f64 {
        self.as_slice().iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// `out += self · f`.
    #[inline]
    pub fn mul_acc(&self, f: &[f64], out: &mut [f64]) {
        for r in 0..self.rows {
            let mut s = 0.0;
            for c in 0..self.cols {
                s += self.v[r * self.cols + c] * f[c];
            }
            out[r] += s;
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Kernel value at displacement `r = x − y` without argument checks.
///
/// Normals that a kernel does not need are ignored.
#[inline]
pub fn eval_displacement(kind: KernelKind, r: &[f64], n_x: &[f64], n_y: &[f64]) -> Block {
    let r2 = dot(r, r);
    match kind {
        SingleLayer2D => Block::scalar(-0.25 * r2.ln() / PI),
        DoubleLayer2D => Block::scalar(dot(r, n_y) / (2.0 * PI * r2)),
        AdjointDoubleLayer2D => Block::scalar(-dot(r, n_x) / (2.0 * PI * r2)),
        ModifiedDoubleLayer2D => {
            let mut b = Block::zeros(2, 1);
            b.v[0] = r[0] / (2.0 * PI * r2);
            b.v[1] = r[1] / (2.0 * PI * r2);
            b
        }
        Stokeslet2D => {
            let mut b = Block::zeros(2, 2);
            let l = -0.5 * r2.ln();
            for i in 0..2 {
                for j in 0..2 {
                    let delta = if i == j { l } else { 0.0 };
                    b.v[2 * i + j] = (delta + r[i] * r[j] / r2) / (4.0 * PI);
                }
            }
            b
        }
        SingleLayer3D => Block::scalar(1.0 / (4.0 * PI * r2.sqrt())),
        DoubleLayer3D => Block::scalar(-dot(r, n_y) / (4.0 * PI * r2 * r2.sqrt())),
        AdjointDoubleLayer3D => Block::scalar(dot(r, n_x) / (4.0 * PI * r2 * r2.sqrt())),
        ModifiedDoubleLayer3D => {
            let mut b = Block::zeros(3, 1);
            let s = -1.0 / (4.0 * PI * r2 * r2.sqrt());
            for i in 0..3 {
                b.v[i] = s * r[i];
            }
            b
        }
        Stokeslet3D => {
            let mut b = Block::zeros(3, 3);
            let rn = r2.sqrt();
            for i in 0..3 {
                for j in 0..3 {
                    let delta = if i == j { 1.0 / rn } else { 0.0 };
                    b.v[3 * i + j] = (delta + r[i] * r[j] / (r2 * rn)) / (8.0 * PI);
                }
            }
            b
        }
    }
}

/// Pointwise kernel `κ(x − y; n_x, n_y)`.
pub fn eval_kernel(kind: KernelKind, x: &[f64], y: &[f64], n_x: Option<&[f64]>, n_y: Option<&[f64]>) -> Result<Block> {
    let d = kind.dims();
    if x.len() != d || y.len() != d {
        return Err(Error::invalid(format!("{kind} expects {d}-dimensional points")));
    }
    let zero = [0.0; 3];
    let nx = match (kind.needs_nx(), n_x) {
        (true, None) => return Err(Error::invalid(format!("{kind} requires n_x"))),
        (_, Some(n)) if n.len() != d => return Err(Error::invalid("n_x has wrong dimension")),
        (_, n) => n.unwrap_or(&zero[..d]),
    };
    let ny = match (kind.needs_ny(), n_y) {
        (true, None) => return Err(Error::invalid(format!("{kind} requires n_y"))),
        (_, Some(n)) if n.len() != d => return Err(Error::invalid("n_y has wrong dimension")),
        (_, n) => n.unwrap_or(&zero[..d]),
    };
    let r: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
    if r.iter().all(|&v| v == 0.0) {
        return Err(Error::Singularity);
    }
    Ok(eval_displacement(kind, &r, nx, ny))
}

/// Leading-order value of `∫_{∂Ω∩B_ε(x)} κ(x−y) f(y) dy`.
///
/// `grad_f` is `d_f × d` row-major; it only enters the modified double layer.
/// The normal term of the modified double layers is signed so that it matches
/// the kernel (`κ_MDL · n_x = −κ_ADL` in 2D and `+κ_ADL` in 3D).
pub fn short_range_asymptotic(kind: KernelKind, eps: f64, f: &[f64], grad_f: &[f64], n_x: &[f64], mean_curv: f64) -> Vec<f64> {
    let mut out = vec![0.0; kind.d_u()];
    match kind {
        SingleLayer2D => out[0] = -(eps * eps.ln() - eps) / PI * f[0],
        DoubleLayer2D | AdjointDoubleLayer2D => out[0] = -eps * mean_curv / (2.0 * PI) * f[0],
        ModifiedDoubleLayer2D => {
            for a in 0..2 {
                out[a] = eps * mean_curv * n_x[a] / (2.0 * PI) * f[0] - eps / PI * grad_f[a];
            }
        }
        Stokeslet2D => {
            let c = (-eps * eps.ln() + eps) / (2.0 * PI);
            tangential_mix(&mut out, f, n_x, c, eps / (2.0 * PI));
        }
        SingleLayer3D => out[0] = 0.5 * eps * f[0],
        DoubleLayer3D | AdjointDoubleLayer3D => out[0] = eps * mean_curv / 8.0 * f[0],
        ModifiedDoubleLayer3D => {
            for a in 0..3 {
                out[a] = -eps * mean_curv * n_x[a] / 8.0 * f[0] + 0.25 * eps * grad_f[a];
            }
        }
        Stokeslet3D => tangential_mix(&mut out, f, n_x, 0.25 * eps, eps / 8.0),
    }
    out
}

/// `out = c_iso f + c_tan (I − n nᵀ) f`.
fn tangential_mix(out: &mut [f64], f: &[f64], n: &[f64], c_iso: f64, c_tan: f64) {
    let nf = dot(n, f);
    for a in 0..out.len() {
        out[a] = c_iso * f[a] + c_tan * (f[a] - n[a] * nf);
    }
}

/// Maximum of `‖∇ᵏκ(x)‖ · ‖x‖^(k+d−1) / C` over sampled `x`, for `k = 0, 1, 2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegularityReport {
    pub kernel: KernelKind,
    pub constant: f64,
    pub max_ratio: [f64; 3],
    pub pass: bool,
}

/// Sample `‖x‖ ∈ [1e-3, 1]` log-uniformly (endpoints included) with random directions and random unit
/// normals, and differentiate by central finite differences with step `1e-5‖x‖`.
pub fn verify_regularity_bounds(kind: KernelKind, c: f64, n_samples: usize, seed: u64) -> Result<RegularityReport> {
    if c <= 0.0 {
        return Err(Error::invalid("regularity constant must be positive"));
    }
    let d = kind.dims();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_ratio = [0.0f64; 3];
    let unit = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        loop {
            let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let n = dot(&v, &v).sqrt();
            if n > 0.1 && n <= 1.0 {
                return v.iter().map(|x| x / n).collect();
            }
        }
    };
    for sample in 0..n_samples {
        // The range endpoints come first so the extremes are always covered.
        let rad = match sample {
            0 => 1.0,
            1 => 1e-3,
            _ => 10f64.powf(rng.random_range(-3.0..=0.0)),
        };
        let x: Vec<f64> = unit(&mut rng).iter().map(|v| v * rad).collect();
        let nx = unit(&mut rng);
        let ny = unit(&mut rng);
        let k = |p: &[f64]| eval_displacement(kind, p, &nx, &ny);
        let h = 1e-5 * rad;
        let shifted = |da: Option<(usize, f64)>, db: Option<(usize, f64)>| {
            let mut p = x.clone();
            if let Some((a, s)) = da {
                p[a] += s * h;
            }
            if let Some((b, s)) = db {
                p[b] += s * h;
            }
            k(&p)
        };
        let k0 = k(&x).frobenius();
        let mut g1 = 0.0;
        let mut g2 = 0.0;
        for a in 0..d {
            let diff = shifted(Some((a, 1.0)), None).plus(&shifted(Some((a, -1.0)), None).scale(-1.0));
            g1 += diff.scale(0.5 / h).as_slice().iter().map(|v| v * v).sum::<f64>();
            for b in 0..d {
                let pp = shifted(Some((a, 1.0)), Some((b, 1.0)));
                let pm = shifted(Some((a, 1.0)), Some((b, -1.0)));
                let mp = shifted(Some((a, -1.0)), Some((b, 1.0)));
                let mm = shifted(Some((a, -1.0)), Some((b, -1.0)));
                let second = pp.plus(&pm.scale(-1.0)).plus(&mp.scale(-1.0)).plus(&mm).scale(0.25 / (h * h));
                g2 += second.as_slice().iter().map(|v| v * v).sum::<f64>();
            }
        }
        let norms = [k0, g1.sqrt(), g2.sqrt()];
        for (order, &nv) in norms.iter().enumerate() {
            let ratio = nv * rad.powi((order + d - 1) as i32) / c;
            max_ratio[order] = max_ratio[order].max(ratio);
        }
    }
    Ok(RegularityReport {
        kernel: kind,
        constant: c,
        pass: max_ratio.iter().all(|&r| r <= 1.0),
        max_ratio,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn channel_counts() {
        assert_eq!((Stokeslet2D.d_f(), Stokeslet2D.d_u()), (2, 2));
        assert_eq!((ModifiedDoubleLayer2D.d_f(), ModifiedDoubleLayer2D.d_u()), (1, 2));
        assert_eq!((Stokeslet3D.d_f(), Stokeslet3D.d_u()), (3, 3));
        for k in KernelKind::ALL {
            assert_eq!(k.name().parse::<KernelKind>().unwrap(), k);
        }
    }

    #[test]
    fn single_layer_at_unit_distance() {
        let v = eval_kernel(SingleLayer2D, &[1.0, 0.0], &[0.0, 0.0], None, None).unwrap();
        assert_eq!(v.get(0, 0), 0.0);
    }

    #[test]
    fn double_layer_constant_on_circle() {
        let r = 1.7;
        for (t1, t2) in [(0.1, 2.0), (1.0, 4.0), (3.0, 3.5)] {
            let x = [r * f64::cos(t1), r * f64::sin(t1)];
            let y = [r * f64::cos(t2), r * f64::sin(t2)];
            let ny = [y[0] / r, y[1] / r];
            let v = eval_kernel(DoubleLayer2D, &x, &y, None, Some(&ny)).unwrap();
            assert_abs_diff_eq!(v.get(0, 0), -1.0 / (4.0 * PI * r), epsilon = 1e-14);
        }
    }

    #[test]
    fn singular_and_missing_normal_errors() {
        assert!(matches!(eval_kernel(SingleLayer2D, &[1.0, 1.0], &[1.0, 1.0], None, None), Err(Error::Singularity)));
        assert!(eval_kernel(DoubleLayer2D, &[1.0, 0.0], &[0.0, 0.0], None, None).is_err());
        assert!(eval_kernel(AdjointDoubleLayer3D, &[1.0, 0.0, 0.0], &[0.0; 3], None, None).is_err());
    }

    #[test]
    fn stokeslet_symmetric_and_mdl_antisymmetric() {
        let r = [0.3, -0.7];
        let s = eval_displacement(Stokeslet2D, &r, &[0.0; 2], &[0.0; 2]);
        assert_eq!(s.get(0, 1), s.get(1, 0));
        let a = eval_displacement(ModifiedDoubleLayer3D, &[0.1, 0.2, 0.3], &[0.0; 3], &[0.0; 3]);
        let b = eval_displacement(ModifiedDoubleLayer3D, &[-0.1, -0.2, -0.3], &[0.0; 3], &[0.0; 3]);
        for i in 0..3 {
            assert_eq!(a.v[i], -b.v[i]);
        }
    }

    #[test]
    fn double_adjoint_duality() {
        let (x, y, ny) = ([0.3, 0.1], [-0.4, 0.8], [0.6, 0.8]);
        let d = eval_kernel(DoubleLayer2D, &x, &y, None, Some(&ny)).unwrap();
        let a = eval_kernel(AdjointDoubleLayer2D, &y, &x, Some(&ny), None).unwrap();
        assert_abs_diff_eq!(d.get(0, 0), a.get(0, 0), epsilon = 1e-15);
    }

    #[test]
    fn short_range_table_values() {
        let e = (-1f64).exp();
        let v = short_range_asymptotic(SingleLayer2D, e, &[1.0], &[0.0, 0.0], &[1.0, 0.0], 1.0);
        assert_abs_diff_eq!(v[0], 2.0 / (std::f64::consts::E * PI), epsilon = 1e-15);
        let v = short_range_asymptotic(DoubleLayer2D, 0.1, &[1.0], &[0.0, 0.0], &[1.0, 0.0], 1.0);
        assert_abs_diff_eq!(v[0], -0.1 / (2.0 * PI), epsilon = 1e-15);
        for k in KernelKind::ALL {
            let d = k.dims();
            let n: Vec<f64> = (0..d).map(|i| if i == 0 { 1.0 } else { 0.0 }).collect();
            let v = short_range_asymptotic(k, 0.1, &vec![0.0; k.d_f()], &vec![0.0; k.d_f() * d], &n, 0.7);
            assert!(v.iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn single_layer_3d_ratio_is_exact() {
        let rep = verify_regularity_bounds(SingleLayer3D, 2.0, 50, 1).unwrap();
        assert_abs_diff_eq!(rep.max_ratio[0], 1.0 / (8.0 * PI), epsilon = 1e-12);
        let rep = verify_regularity_bounds(SingleLayer2D, 1.0, 50, 1).unwrap();
        assert!((rep.max_ratio[1] - 1.0 / (2.0 * PI)).abs() < 1e-6);
    }
}
