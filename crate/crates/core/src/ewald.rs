//! Ewald-type split of a singular kernel into a mollified Fourier series and a
//! local residual, with linear-cost application on point clouds.

use crate::geometry::{GradientStencil, PointCloud};
use crate::kernels::{eval_displacement, short_range_asymptotic, Block, KernelKind};
use crate::quadrature::gauss_legendre;
use crate::{Error, Result};
use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::sync::atomic::{AtomicU64, Ordering};

/// `(erf(r/δ)/r, erfc(r/δ)/r)`.
pub fn erf_split(r: f64, delta: f64) -> Result<(f64, f64)> {
    if !(r > 0.0) || !(delta > 0.0) {
        return Err(Error::invalid("erf_split needs r > 0 and δ > 0"));
    }
    let x = r / delta;
    Ok((libm::erf(x) / r, libm::erfc(x) / r))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EwaldConfig {
    /// Standard deviation of the Gaussian mollifier.
    pub delta: f64,
    /// Modes with `‖k‖_∞ ≤ p` are kept.
    pub p: usize,
    /// Near-field radius.
    pub eps: f64,
    /// Box half-lengths; the Fourier period is `2l`.
    pub l: [f64; 2],
}

impl EwaldConfig {
    /// `δ = 0.85 · 2 l_min / p` and `ε = 5δ`; the damping at `|k| = p` is `e^(−2π²·0.85²)`.
    pub fn for_box(l: [f64; 2], p: usize) -> Self {
        let delta = 0.85 * 2.0 * l[0].min(l[1]) / p.max(1) as f64;
        EwaldConfig {
            delta,
            p,
            eps: 5.0 * delta,
            l,
        }
    }

    /// Parameters of the decomposition theorem: `δ = p^(−γ)`, `ε = δ^t`,
    /// `t = (2 − α(d+1)) / (q + 2d + 1)` with `d = 2`.
    pub fn theorem(p: usize, gamma: f64, alpha: f64, q: f64, l: [f64; 2]) -> Self {
        let delta = (p as f64).powf(-gamma);
        let t = (2.0 - 3.0 * alpha) / (q + 5.0);
        EwaldConfig {
            delta,
            p,
            eps: delta.powf(t),
            l,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lmin = self.l[0].min(self.l[1]);
        if !(self.delta > 0.0 && self.delta < 0.5 * lmin) {
            return Err(Error::invalid(format!("δ = {} must lie in (0, l_min/2)", self.delta)));
        }
        if self.p < 1 {
            return Err(Error::invalid("p must be at least 1"));
        }
        if !(self.eps >= self.delta) {
            return Err(Error::invalid(format!("ε = {} must be at least δ = {}", self.eps, self.delta)));
        }
        Ok(())
    }
}

/// Kernel whose Fourier coefficients are tabulated; normal-dependent kernels reuse
/// the modified double layer and apply the normal outside the transform.
pub fn base_kernel(kind: KernelKind) -> Result<KernelKind> {
    use KernelKind::*;
    match kind {
        SingleLayer2D => Ok(SingleLayer2D),
        DoubleLayer2D | ModifiedDoubleLayer2D | AdjointDoubleLayer2D => Ok(ModifiedDoubleLayer2D),
        Stokeslet2D => Ok(Stokeslet2D),
        _ => Err(Error::invalid(format!("{kind}: Fourier tables are only built for 2D kernels"))),
    }
}

/// How a kernel couples to normals relative to its base kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormalCoupling {
    None,
    /// `κ = κ_base · n_y`: the base block acts transposed on `f ⊗ n_y`.
    SourceNormal,
    /// `κ = −n_x · κ_base`.
    TargetNormal,
}

pub fn coupling(kind: KernelKind) -> NormalCoupling {
    match kind {
        KernelKind::DoubleLayer2D => NormalCoupling::SourceNormal,
        KernelKind::AdjointDoubleLayer2D => NormalCoupling::TargetNormal,
        _ => NormalCoupling::None,
    }
}

/// Fourier coefficients `(1/|B|) ∫_B κ(x) e^(−iπ k·x/l) dx` for `‖k‖_∞ ≤ p`, one
/// `rows × cols` block per mode.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralKernel {
    pub kind: KernelKind,
    pub p: usize,
    pub l: [f64; 2],
    pub rows: usize,
    pub cols: usize,
    /// Mollifier width already applied (0 for raw coefficients).
    pub delta: f64,
    /// Index `((k1+p)(2p+1) + (k2+p)) · rows·cols + r·cols + c`.
    pub coeffs: Vec<Complex64>,
}

impl SpectralKernel {
    pub fn side(&self) -> usize {
        2 * self.p + 1
    }

    pub fn n_modes(&self) -> usize {
        self.side() * self.side()
    }

    pub fn block_size(&self) -> usize {
        self.rows * self.cols
    }

    pub fn mode_index(&self, k1: i64, k2: i64) -> usize {
        let p = self.p as i64;
        ((k1 + p) as usize) * self.side() + (k2 + p) as usize
    }

    pub fn coeff(&self, k1: i64, k2: i64, r: usize, c: usize) -> Complex64 {
        self.coeffs[self.mode_index(k1, k2) * self.block_size() + r * self.cols + c]
    }

    /// Largest `|c(k) − conj(c(−k))|` over all modes.
    pub fn conjugate_asymmetry(&self) -> f64 {
        let p = self.p as i64;
        let mut worst = 0.0f64;
        for k1 in -p..=p {
            for k2 in -p..=p {
                for e in 0..self.block_size() {
                    let a = self.coeffs[self.mode_index(k1, k2) * self.block_size() + e];
                    let b = self.coeffs[self.mode_index(-k1, -k2) * self.block_size() + e];
                    worst = worst.max((a - b.conj()).norm());
                }
            }
        }
        worst
    }

    /// Direct separable evaluation of the real part of the truncated series at `r`.
    pub fn eval(&self, r: &[f64]) -> Block {
        let e1 = phases(self.p, r[0], self.l[0], 1.0);
        let e2 = phases(self.p, r[1], self.l[1], 1.0);
        let bs = self.block_size();
        let side = self.side();
        let mut acc = vec![Complex64::new(0.0, 0.0); bs];
        for (a, &z1) in e1.iter().enumerate() {
            let mut inner = vec![Complex64::new(0.0, 0.0); bs];
            for (b, &z2) in e2.iter().enumerate() {
                let base = (a * side + b) * bs;
                for e in 0..bs {
                    inner[e] += self.coeffs[base + e] * z2;
                }
            }
            for e in 0..bs {
                acc[e] += inner[e] * z1;
            }
        }
        let mut out = Block::zeros(self.rows, self.cols);
        for e in 0..bs {
            out.v[e] = acc[e].re;
        }
        out
    }
}

/// `e^(sign · iπ k x / l)` for `k = −p..=p`.
pub(crate) fn phases(p: usize, x: f64, l: f64, sign: f64) -> Vec<Complex64> {
    let step = Complex64::from_polar(1.0, sign * PI * x / l);
    let mut out = vec![Complex64::new(0.0, 0.0); 2 * p + 1];
    out[p] = Complex64::new(1.0, 0.0);
    for k in 1..=p {
        out[p + k] = out[p + k - 1] * step;
    }
    for k in 1..=p {
        out[p - k] = out[p + k].conj();
    }
    out
}

/// Smooth cutoff that is 1 near the origin and negligible beyond `2σ`.
fn cutoff(r: f64, sigma: f64) -> f64 {
    (-(r / sigma).powi(8)).exp()
}

/// Numerical Fourier coefficients of the base kernel of `kind` on `Π[−lᵢ, lᵢ]`.
///
/// The kernel is split with a smooth cutoff of width `σ = 4h`, `h = 2l/grid_n`.
/// The regular part is integrated by 8-point Gauss-Legendre on each of the
/// `grid_n²` cells, the singular part in polar coordinates around the origin.
pub fn kernel_fourier_coeffs(kind: KernelKind, p: usize, grid_n: usize, l: [f64; 2]) -> Result<SpectralKernel> {
    let base = base_kernel(kind)?;
    if grid_n < 8 * p || !grid_n.is_multiple_of(2) || grid_n < 32 {
        return Err(Error::invalid(format!(
            "grid_n = {grid_n} too coarse: need an even value >= max(8p, 32) = {}",
            (8 * p).max(32)
        )));
    }
    let (rows, cols) = (base.d_u(), base.d_f());
    let bs = rows * cols;
    let side = 2 * p + 1;
    let h = 2.0 * l[0].min(l[1]) / grid_n as f64;
    let sigma = 4.0 * h;
    let zero = [0.0; 2];
    let area = 4.0 * l[0] * l[1];

    // Regular part: tensor Gauss-Legendre, then separable transform per component.
    let axis = |len: f64| -> (Vec<f64>, Vec<f64>) {
        let (gx, gw) = gauss_legendre(8, 0.0, 1.0);
        let cell = 2.0 * len / grid_n as f64;
        let mut xs = Vec::with_capacity(8 * grid_n);
        let mut ws = Vec::with_capacity(8 * grid_n);
        for c in 0..grid_n {
            let a = -len + c as f64 * cell;
            for (x, w) in gx.iter().zip(&gw) {
                xs.push(a + x * cell);
                ws.push(w * cell);
            }
        }
        (xs, ws)
    };
    let (x1, w1) = axis(l[0]);
    let (x2, w2) = axis(l[1]);
    let (m1, m2) = (x1.len(), x2.len());
    let trig = |xs: &[f64], len: f64| -> (DMatrix<f64>, DMatrix<f64>) {
        let mut c = DMatrix::zeros(side, xs.len());
        let mut s = DMatrix::zeros(side, xs.len());
        for k in 0..side {
            let kk = k as f64 - p as f64;
            for (a, &x) in xs.iter().enumerate() {
                let (sn, cs) = (PI * kk * x / len).sin_cos();
                c[(k, a)] = cs;
                s[(k, a)] = sn;
            }
        }
        (c, s)
    };
    let (c1, s1) = trig(&x1, l[0]);
    let (c2, s2) = trig(&x2, l[1]);
    let samples: Vec<Block> = crate::par::map_range(m1 * m2, |idx| {
        let (a, b) = (idx / m2, idx % m2);
        let r = [x1[a], x2[b]];
        let rn = r[0].hypot(r[1]);
        eval_displacement(base, &r, &zero, &zero).scale((1.0 - cutoff(rn, sigma)) * w1[a] * w2[b])
    });
    let mut coeffs = vec![Complex64::new(0.0, 0.0); side * side * bs];
    for e in 0..bs {
        let g = DMatrix::from_fn(m1, m2, |a, b| samples[a * m2 + b].v[e]);
        let gc = &g * c2.transpose();
        let gs = &g * s2.transpose();
        // e^(−iθ₁)G e^(−iθ₂)ᵀ with e^(−iθ) = cos θ − i sin θ.
        let re = &c1 * &gc - &s1 * &gs;
        let im = -(&c1 * &gs + &s1 * &gc);
        for k1 in 0..side {
            for k2 in 0..side {
                coeffs[(k1 * side + k2) * bs + e] = Complex64::new(re[(k1, k2)], im[(k1, k2)]) / area;
            }
        }
    }

    // Singular part in polar coordinates with r = R u².
    let big_r = 2.0 * sigma;
    let (ur, uw) = {
        let mut xs = Vec::new();
        let mut ws = Vec::new();
        for q in 0..12 {
            let (x, w) = gauss_legendre(8, q as f64 / 12.0, (q + 1) as f64 / 12.0);
            xs.extend(x);
            ws.extend(w);
        }
        (xs, ws)
    };
    let n_ang = 64;
    let polar: Vec<(f64, f64, Block)> = {
        let mut pts = Vec::with_capacity(ur.len() * n_ang);
        for (u, wu) in ur.iter().zip(&uw) {
            let r = big_r * u * u;
            let jac = 2.0 * big_r * u * r * wu * (2.0 * PI / n_ang as f64);
            for m in 0..n_ang {
                let phi = 2.0 * PI * m as f64 / n_ang as f64;
                let x = [r * phi.cos(), r * phi.sin()];
                let k = eval_displacement(base, &x, &zero, &zero).scale(cutoff(r, sigma) * jac);
                pts.push((x[0], x[1], k));
            }
        }
        pts
    };
    let partial: Vec<Vec<Complex64>> = crate::par::map_slice(&polar.chunks(256).collect::<Vec<_>>(), |chunk| {
        let mut acc = vec![Complex64::new(0.0, 0.0); side * side * bs];
        for (x, y, k) in chunk.iter() {
            let e1 = phases(p, *x, l[0], -1.0);
            let e2 = phases(p, *y, l[1], -1.0);
            for a in 0..side {
                for b in 0..side {
                    let z = e1[a] * e2[b];
                    let base_idx = (a * side + b) * bs;
                    for e in 0..bs {
                        acc[base_idx + e] += z * k.v[e];
                    }
                }
            }
        }
        acc
    });
    for part in partial {
        for (c, v) in coeffs.iter_mut().zip(part) {
            *c += v / area;
        }
    }
    Ok(SpectralKernel {
        kind: base,
        p,
        l,
        rows,
        cols,
        delta: 0.0,
        coeffs,
    })
}

/// Gaussian damping `κ̂_k e^(−2π²δ²‖k/(2l)‖²)` of every mode.
pub fn mollify(raw: &SpectralKernel, delta: f64) -> SpectralKernel {
    let mut out = raw.clone();
    let p = raw.p as i64;
    let bs = raw.block_size();
    for k1 in -p..=p {
        for k2 in -p..=p {
            let xi1 = k1 as f64 / (2.0 * raw.l[0]);
            let xi2 = k2 as f64 / (2.0 * raw.l[1]);
            let factor = (-2.0 * PI * PI * delta * delta * (xi1 * xi1 + xi2 * xi2)).exp();
            let idx = raw.mode_index(k1, k2) * bs;
            for c in &mut out.coeffs[idx..idx + bs] {
                *c *= factor;
            }
        }
    }
    out.delta = (raw.delta * raw.delta + delta * delta).sqrt();
    out
}

/// Fourier moments `S_k = Σ_j conj(e_k(y_j)) g_j w_j` of an N×c input.
pub fn fourier_moments(p: usize, l: [f64; 2], cloud: &PointCloud, g: &[f64], c: usize) -> Vec<Complex64> {
    let side = 2 * p + 1;
    let n = cloud.len();
    let chunks: Vec<(usize, usize)> = (0..n).step_by(64).map(|s| (s, (s + 64).min(n))).collect();
    let parts = crate::par::map_slice(&chunks, |&(s, e)| {
        let mut acc = vec![Complex64::new(0.0, 0.0); side * side * c];
        for j in s..e {
            if !cloud.mask[j] || cloud.weights[j] == 0.0 {
                continue;
            }
            let y = cloud.point(j);
            let e1 = phases(p, y[0], l[0], -1.0);
            let e2 = phases(p, y[1], l[1], -1.0);
            let gj: Vec<f64> = (0..c).map(|ch| g[j * c + ch] * cloud.weights[j]).collect();
            for a in 0..side {
                for b in 0..side {
                    let z = e1[a] * e2[b];
                    let base = (a * side + b) * c;
                    for ch in 0..c {
                        acc[base + ch] += z * gj[ch];
                    }
                }
            }
        }
        acc
    });
    let mut total = vec![Complex64::new(0.0, 0.0); side * side * c];
    for part in parts {
        for (t, v) in total.iter_mut().zip(part) {
            *t += v;
        }
    }
    total
}

/// `u_i = Re Σ_k e_k(x_i) T_k` for per-mode vectors `T_k` of length `c`.
pub fn fourier_synthesis(p: usize, l: [f64; 2], cloud: &PointCloud, t: &[Complex64], c: usize) -> Vec<f64> {
    let side = 2 * p + 1;
    let mut out = vec![0.0; cloud.len() * c];
    crate::par::for_each_row(&mut out, c, |i, row| {
        if !cloud.mask[i] {
            return;
        }
        let x = cloud.point(i);
        let e1 = phases(p, x[0], l[0], 1.0);
        let e2 = phases(p, x[1], l[1], 1.0);
        for (a, &z1) in e1.iter().enumerate() {
            let mut inner = vec![Complex64::new(0.0, 0.0); c];
            for (b, &z2) in e2.iter().enumerate() {
                let base = (a * side + b) * c;
                for ch in 0..c {
                    inner[ch] += t[base + ch] * z2;
                }
            }
            for ch in 0..c {
                row[ch] += (inner[ch] * z1).re;
            }
        }
    });
    out
}

/// Apply the spectral blocks (optionally transposed) to an N×c input.
fn spectral_apply(sk: &SpectralKernel, transpose: bool, cloud: &PointCloud, g: &[f64]) -> Vec<f64> {
    let (out_c, in_c) = if transpose { (sk.cols, sk.rows) } else { (sk.rows, sk.cols) };
    let s = fourier_moments(sk.p, sk.l, cloud, g, in_c);
    let bs = sk.block_size();
    let mut t = vec![Complex64::new(0.0, 0.0); sk.n_modes() * out_c];
    for m in 0..sk.n_modes() {
        for r in 0..out_c {
            let mut acc = Complex64::new(0.0, 0.0);
            for c in 0..in_c {
                let e = if transpose { c * sk.cols + r } else { r * sk.cols + c };
                acc += sk.coeffs[m * bs + e] * s[m * in_c + c];
            }
            t[m * out_c + r] = acc;
        }
    }
    fourier_synthesis(sk.p, sk.l, cloud, &t, out_c)
}

/// Input with the source normal folded in: `f ⊗ n_y` for the double layer.
fn couple_source(kind: KernelKind, cloud: &PointCloud, f: &[f64]) -> Vec<f64> {
    match coupling(kind) {
        NormalCoupling::SourceNormal => {
            let d = cloud.dims;
            (0..cloud.len()).flat_map(|j| (0..d).map(move |a| f[j] * cloud.normals[j * d + a])).collect()
        }
        _ => f.to_vec(),
    }
}

fn check_cloud(kind: KernelKind, sk: &SpectralKernel, cloud: &PointCloud, f: &[f64]) -> Result<()> {
    if cloud.dims != 2 {
        return Err(Error::invalid("Ewald evaluation is implemented for 2D clouds"));
    }
    if base_kernel(kind)? != sk.kind {
        return Err(Error::invalid(format!("spectral table for {} cannot evaluate {kind}", sk.kind)));
    }
    if f.len() != cloud.len() * kind.d_f() {
        return Err(Error::invalid("input has wrong shape"));
    }
    Ok(())
}

/// Truncated long-range integral `Σ_k e_k(x_i) κ̂_k Σ_j conj(e_k(y_j)) f_j w_j`.
pub fn long_range_apply(kind: KernelKind, sk: &SpectralKernel, cloud: &PointCloud, f: &[f64]) -> Result<Vec<f64>> {
    check_cloud(kind, sk, cloud, f)?;
    Ok(match coupling(kind) {
        NormalCoupling::None => spectral_apply(sk, false, cloud, f),
        NormalCoupling::SourceNormal => spectral_apply(sk, true, cloud, &couple_source(kind, cloud, f)),
        NormalCoupling::TargetNormal => {
            let v = spectral_apply(sk, false, cloud, f);
            (0..cloud.len()).map(|i| -(v[2 * i] * cloud.normals[2 * i] + v[2 * i + 1] * cloud.normals[2 * i + 1])).collect()
        }
    })
}

/// Tabulated long-range kernel on `[−H, H]²` with 4×4 cubic Lagrange interpolation.
#[derive(Clone, Debug)]
pub struct LongRangeTable {
    origin: f64,
    h: f64,
    n: usize,
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl LongRangeTable {
    pub fn build(sk: &SpectralKernel, half_width: f64, spacing: f64) -> Self {
        let h = spacing;
        let origin = -half_width - 2.0 * h;
        let n = (2.0 * half_width / h).ceil() as usize + 5;
        let t: Vec<f64> = (0..n).map(|a| origin + a as f64 * h).collect();
        let side = sk.side();
        let bs = sk.block_size();
        let trig = |len: f64| -> (DMatrix<f64>, DMatrix<f64>) {
            let mut c = DMatrix::zeros(n, side);
            let mut s = DMatrix::zeros(n, side);
            for (a, &x) in t.iter().enumerate() {
                for k in 0..side {
                    let (sn, cs) = (PI * (k as f64 - sk.p as f64) * x / len).sin_cos();
                    c[(a, k)] = cs;
                    s[(a, k)] = sn;
                }
            }
            (c, s)
        };
        let (c1, s1) = trig(sk.l[0]);
        let (c2, s2) = trig(sk.l[1]);
        let mut values = vec![0.0; n * n * bs];
        for e in 0..bs {
            let cre = DMatrix::from_fn(side, side, |a, b| sk.coeffs[(a * side + b) * bs + e].re);
            let cim = DMatrix::from_fn(side, side, |a, b| sk.coeffs[(a * side + b) * bs + e].im);
            // Re[(C1 + iS1)(A + iB)(C2 + iS2)ᵀ]
            let l_re = &c1 * &cre - &s1 * &cim;
            let l_im = &c1 * &cim + &s1 * &cre;
            let v = &l_re * c2.transpose() - &l_im * s2.transpose();
            for a in 0..n {
                for b in 0..n {
                    values[(a * n + b) * bs + e] = v[(a, b)];
                }
            }
        }
        LongRangeTable {
            origin,
            h,
            n,
            rows: sk.rows,
            cols: sk.cols,
            values,
        }
    }

    pub fn half_width(&self) -> f64 {
        -self.origin - 2.0 * self.h
    }

    fn weights(&self, x: f64) -> Option<(usize, [f64; 4])> {
        let s = (x - self.origin) / self.h;
        let i = s.floor() as i64 - 1;
        if i < 0 || i as usize + 3 >= self.n {
            return None;
        }
        let t = s - (i + 1) as f64;
        // Lagrange basis on nodes −1, 0, 1, 2.
        Some((
            i as usize,
            [
                -t * (t - 1.0) * (t - 2.0) / 6.0,
                (t + 1.0) * (t - 1.0) * (t - 2.0) / 2.0,
                -(t + 1.0) * t * (t - 2.0) / 2.0,
                (t + 1.0) * t * (t - 1.0) / 6.0,
            ],
        ))
    }

    /// Interpolated block, or `None` outside the table.
    pub fn eval(&self, r: &[f64]) -> Option<Block> {
        let (i, wx) = self.weights(r[0])?;
        let (j, wy) = self.weights(r[1])?;
        let bs = self.rows * self.cols;
        let mut out = Block::zeros(self.rows, self.cols);
        for (a, wa) in wx.iter().enumerate() {
            for (b, wb) in wy.iter().enumerate() {
                let base = ((i + a) * self.n + (j + b)) * bs;
                let w = wa * wb;
                for e in 0..bs {
                    out.v[e] += w * self.values[base + e];
                }
            }
        }
        Some(out)
    }
}

/// Near-field pairs `0 < ‖x_i − y_j‖ ≤ ε` in CSR form, sorted by `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct NearField {
    pub eps: f64,
    pub offsets: Vec<usize>,
    pub cols: Vec<usize>,
}

impl NearField {
    /// Uniform cell lists with cell size `ε` over the bounding box of the cloud.
    pub fn build(cloud: &PointCloud, eps: f64) -> Result<Self> {
        if !(eps > 0.0) {
            return Err(Error::invalid("near-field radius must be positive"));
        }
        let d = cloud.dims;
        let n = cloud.len();
        let active: Vec<usize> = (0..n).filter(|&i| cloud.mask[i]).collect();
        let mut lo = vec![f64::INFINITY; d];
        let mut hi = vec![f64::NEG_INFINITY; d];
        for &i in &active {
            for a in 0..d {
                lo[a] = lo[a].min(cloud.point(i)[a]);
                hi[a] = hi[a].max(cloud.point(i)[a]);
            }
        }
        let dims: Vec<usize> = (0..d)
            .map(|a| if active.is_empty() { 1 } else { (((hi[a] - lo[a]) / eps).floor() as usize + 1).min(1 << 16) })
            .collect();
        let cell_of = |x: &[f64]| -> Vec<usize> {
            (0..d).map(|a| (((x[a] - lo[a]) / eps).floor() as usize).min(dims[a] - 1)).collect()
        };
        let flat = |c: &[usize]| c.iter().zip(&dims).fold(0usize, |acc, (ci, di)| acc * di + ci);
        let mut cells: std::collections::HashMap<usize, Vec<usize>> = std::collections::HashMap::new();
        for &j in &active {
            cells.entry(flat(&cell_of(cloud.point(j)))).or_default().push(j);
        }
        let eps2 = eps * eps;
        let lists = crate::par::map_range(n, |i| {
            if !cloud.mask[i] {
                return Vec::new();
            }
            let xi = cloud.point(i);
            let ci = cell_of(xi);
            let mut found = Vec::new();
            let offsets: Vec<Vec<i64>> = match d {
                2 => (-1..=1).flat_map(|a| (-1..=1).map(move |b| vec![a, b])).collect(),
                _ => (-1..=1)
                    .flat_map(|a| (-1..=1).flat_map(move |b| (-1..=1).map(move |c| vec![a, b, c])))
                    .collect(),
            };
            for off in offsets {
                let mut c = Vec::with_capacity(d);
                let mut ok = true;
                for a in 0..d {
                    let v = ci[a] as i64 + off[a];
                    if v < 0 || v >= dims[a] as i64 {
                        ok = false;
                        break;
                    }
                    c.push(v as usize);
                }
                if !ok {
                    continue;
                }
                if let Some(members) = cells.get(&flat(&c)) {
                    for &j in members {
                        if j == i {
                            continue;
                        }
                        let r2: f64 = (0..d).map(|a| (xi[a] - cloud.point(j)[a]).powi(2)).sum();
                        if r2 <= eps2 && r2 > 0.0 {
                            found.push(j);
                        }
                    }
                }
            }
            found.sort_unstable();
            found
        });
        let mut offsets = vec![0];
        let mut cols = Vec::new();
        for l in lists {
            cols.extend(l);
            offsets.push(cols.len());
        }
        Ok(NearField { eps, offsets, cols })
    }

    pub fn n_pairs(&self) -> usize {
        self.cols.len()
    }
}

/// Everything needed to apply one kernel on one cloud in linear time.
pub struct FastApplyPlan {
    pub kind: KernelKind,
    pub config: EwaldConfig,
    pub spectral: SpectralKernel,
    table: LongRangeTable,
    near: NearField,
    stencil: Option<GradientStencil>,
    ops: AtomicU64,
}

/// Coefficient grid used by [`FastApplyPlan::new`].
pub fn default_grid_n(p: usize) -> usize {
    (8 * p).max(32).next_multiple_of(2)
}

impl FastApplyPlan {
    pub fn new(config: &EwaldConfig, kind: KernelKind, cloud: &PointCloud) -> Result<Self> {
        config.validate()?;
        let raw = kernel_fourier_coeffs(kind, config.p, default_grid_n(config.p), config.l)?;
        Self::with_spectral(config, kind, cloud, mollify(&raw, config.delta))
    }

    pub fn with_spectral(config: &EwaldConfig, kind: KernelKind, cloud: &PointCloud, spectral: SpectralKernel) -> Result<Self> {
        config.validate()?;
        if config.eps > config.l[0].min(config.l[1]) {
            return Err(Error::invalid(format!(
                "near-field radius {} exceeds the smallest box half-length",
                config.eps
            )));
        }
        let table = LongRangeTable::build(&spectral, config.eps * 1.001, config.delta / 16.0);
        let near = NearField::build(cloud, config.eps)?;
        let stencil = if kind == KernelKind::ModifiedDoubleLayer2D
            && cloud.neighbors.iter().zip(&cloud.mask).all(|(l, &m)| !m || !l.is_empty())
        {
            Some(GradientStencil::build(cloud)?)
        } else {
            None
        };
        Ok(FastApplyPlan {
            kind,
            config: config.clone(),
            spectral,
            table,
            near,
            stencil,
            ops: AtomicU64::new(0),
        })
    }

    pub fn near_field(&self) -> &NearField {
        &self.near
    }

    /// Work units of the last [`apply`](Self::apply): `2 · modes · N + near pairs`.
    pub fn ops(&self) -> u64 {
        self.ops.load(Ordering::Relaxed)
    }

    /// Table value of the long-range kernel, falling back to the direct sum.
    fn long_block(&self, r: &[f64]) -> Block {
        self.table.eval(r).unwrap_or_else(|| self.spectral.eval(r))
    }

    /// Couple a base block to normals: value of `κ(r) f` for the full kernel.
    fn coupled(&self, base: &Block, f: &[f64], nx: &[f64], ny: &[f64], out: &mut [f64]) {
        match coupling(self.kind) {
            NormalCoupling::None => base.mul_acc(f, out),
            NormalCoupling::SourceNormal => out[0] += (base.v[0] * ny[0] + base.v[1] * ny[1]) * f[0],
            NormalCoupling::TargetNormal => out[0] -= (base.v[0] * nx[0] + base.v[1] * nx[1]) * f[0],
        }
    }

    pub fn short_range_apply(&self, cloud: &PointCloud, f: &[f64]) -> Result<Vec<f64>> {
        check_cloud(self.kind, &self.spectral, cloud, f)?;
        if self.near.offsets.len() != cloud.len() + 1 {
            return Err(Error::invalid("plan was built for a different cloud"));
        }
        let (du, df) = (self.kind.d_u(), self.kind.d_f());
        let grads = self.stencil.as_ref().map(|s| s.apply(f, df));
        let zero = [0.0; 2];
        let k0 = self.long_block(&zero);
        let mut out = vec![0.0; cloud.len() * du];
        crate::par::for_each_row(&mut out, du, |i, row| {
            if !cloud.mask[i] {
                return;
            }
            let xi = cloud.point(i);
            let nx = cloud.normal(i);
            for &j in &self.near.cols[self.near.offsets[i]..self.near.offsets[i + 1]] {
                let yj = cloud.point(j);
                let r = [xi[0] - yj[0], xi[1] - yj[1]];
                let ny = cloud.normal(j);
                let fw: Vec<f64> = f[j * df..(j + 1) * df].iter().map(|v| v * cloud.weights[j]).collect();
                let exact = eval_displacement(self.kind, &r, nx, ny);
                exact.mul_acc(&fw, row);
                let long = self.long_block(&r).scale(-1.0);
                self.coupled(&long, &fw, nx, ny, row);
            }
            let fi = &f[i * df..(i + 1) * df];
            let gi = grads.as_ref().map_or(vec![0.0; df * 2], |g| g[i * df * 2..(i + 1) * df * 2].to_vec());
            let s = short_range_asymptotic(self.kind, 0.5 * cloud.weights[i], fi, &gi, nx, cloud.curvature[i]);
            for (o, v) in row.iter_mut().zip(s) {
                *o += v;
            }
            let fw: Vec<f64> = fi.iter().map(|v| -v * cloud.weights[i]).collect();
            self.coupled(&k0, &fw, nx, nx, row);
        });
        Ok(out)
    }

    pub fn apply(&self, cloud: &PointCloud, f: &[f64]) -> Result<Vec<f64>> {
        let mut u = long_range_apply(self.kind, &self.spectral, cloud, f)?;
        let s = self.short_range_apply(cloud, f)?;
        for (a, b) in u.iter_mut().zip(s) {
            *a += b;
        }
        let n_active = cloud.n_active() as u64;
        self.ops.store(2 * self.spectral.n_modes() as u64 * n_active + self.near.n_pairs() as u64, Ordering::Relaxed);
        Ok(u)
    }
}

/// Near-field residual plus self term, using a freshly built plan.
pub fn short_range_residual_apply(kind: KernelKind, sk: &SpectralKernel, cloud: &PointCloud, f: &[f64], eps: f64) -> Result<Vec<f64>> {
    let config = EwaldConfig {
        delta: sk.delta.max(f64::MIN_POSITIVE),
        p: sk.p,
        eps: eps.max(sk.delta),
        l: sk.l,
    };
    if eps > sk.l[0].min(sk.l[1]) {
        return Err(Error::invalid(format!("near-field radius {eps} exceeds the smallest box half-length")));
    }
    let plan = FastApplyPlan::with_spectral(&config, kind, cloud, sk.clone())?;
    let plan = FastApplyPlan {
        near: NearField::build(cloud, eps)?,
        ..plan
    };
    plan.short_range_apply(cloud, f)
}

/// Long-range plus near-field evaluation of `∫ κ(x − y) f(y) dy` at every point.
pub fn fast_apply(config: &EwaldConfig, kind: KernelKind, cloud: &PointCloud, f: &[f64]) -> Result<Vec<f64>> {
    FastApplyPlan::new(config, kind, cloud)?.apply(cloud, f)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecompositionError {
    pub kernel: KernelKind,
    pub p: usize,
    pub delta: f64,
    pub epsilon: f64,
    pub l1_error: f64,
}

/// Quadrature nodes `(x, y, weight, r)` covering the box in polar coordinates
/// around the origin, with geometric radial grading at 0 and a break at `ε`.
fn polar_box_rule(l: [f64; 2], eps: f64) -> Vec<(f64, f64, f64, f64)> {
    let corner = l[1].atan2(l[0]);
    let bounds = [
        0.0,
        corner,
        0.5 * PI,
        PI - corner,
        PI,
        PI + corner,
        1.5 * PI,
        2.0 * PI - corner,
        2.0 * PI,
    ];
    let (rg, rw) = gauss_legendre(12, 0.0, 1.0);
    let mut out = Vec::new();
    for s in bounds.windows(2) {
        let (ang, angw) = gauss_legendre(24, s[0], s[1]);
        for (phi, wphi) in ang.iter().zip(&angw) {
            let (sn, cs) = phi.sin_cos();
            let rmax = (l[0] / cs.abs().max(1e-300)).min(l[1] / sn.abs().max(1e-300));
            let mut cuts = Vec::new();
            let e = eps.min(rmax);
            let mut t = e;
            for _ in 0..40 {
                cuts.push(t);
                t *= 0.5;
            }
            cuts.push(0.0);
            cuts.reverse();
            let mut t = e;
            while t < rmax {
                t = (2.0 * t).min(rmax);
                cuts.push(t);
            }
            for c in cuts.windows(2) {
                let len = c[1] - c[0];
                if len <= 0.0 {
                    continue;
                }
                for (u, wu) in rg.iter().zip(&rw) {
                    let r = c[0] + u * len;
                    out.push((r * cs, r * sn, wphi * wu * len * r, r));
                }
            }
        }
    }
    out
}

/// `∫_B |κ̃ − κ| dx` for a kernel given as a closure and its raw coefficients,
/// where `κ̃` is the mollified truncated series plus, on `B_ε`, the constant that
/// matches the zeroth moment of the residual.
pub fn decomposition_error_with(kernel: impl Fn(&[f64]) -> Block + Sync, raw: &SpectralKernel, delta: f64, eps: f64) -> f64 {
    let long = mollify(raw, delta);
    let nodes = polar_box_rule(raw.l, eps);
    let resid: Vec<Block> = crate::par::map_slice(&nodes, |&(x, y, _, _)| {
        let r = [x, y];
        kernel(&r).plus(&long.eval(&r).scale(-1.0))
    });
    let bs = raw.block_size();
    let mut mean = [0.0; 9];
    let mut area = 0.0;
    for ((_, _, w, r), res) in nodes.iter().zip(&resid) {
        if *r <= eps {
            area += w;
            for e in 0..bs {
                mean[e] += w * res.v[e];
            }
        }
    }
    if area > 0.0 {
        mean.iter_mut().for_each(|m| *m /= area);
    }
    nodes
        .iter()
        .zip(&resid)
        .map(|((_, _, w, r), res)| {
            let s: f64 = (0..bs)
                .map(|e| {
                    let v = res.v[e] - if *r <= eps { mean[e] } else { 0.0 };
                    v * v
                })
                .sum();
            w * s.sqrt()
        })
        .sum()
}

/// L1 error of the decomposition for the base kernel of `kind` on the box of `config`.
pub fn measure_decomposition_error(kind: KernelKind, config: &EwaldConfig, grid_n: usize) -> Result<DecompositionError> {
    config.validate()?;
    let base = base_kernel(kind)?;
    let raw = kernel_fourier_coeffs(base, config.p, grid_n, config.l)?;
    let zero = [0.0; 2];
    let err = decomposition_error_with(|r| eval_displacement(base, r, &zero, &zero), &raw, config.delta, config.eps);
    Ok(DecompositionError {
        kernel: base,
        p: config.p,
        delta: config.delta,
        epsilon: config.eps,
        l1_error: err,
    })
}

/// Decomposition error over `ps` with the theorem's parameter choices on the unit box.
pub fn decomposition_sweep(kind: KernelKind, ps: &[usize], gamma: f64, alpha: f64, q: f64) -> Result<Vec<DecompositionError>> {
    ps.iter()
        .map(|&p| {
            let cfg = EwaldConfig::theorem(p, gamma, alpha, q, [0.5, 0.5]);
            measure_decomposition_error(kind, &cfg, default_grid_n(p))
        })
        .collect()
}

/// CSV with header `kernel,p,delta,epsilon,l1_error`.
pub fn sweep_csv(rows: &[DecompositionError]) -> String {
    let mut s = String::from("kernel,p,delta,epsilon,l1_error\n");
    for r in rows {
        s.push_str(&format!("{},{},{:.12e},{:.12e},{:.12e}\n", r.kernel, r.p, r.delta, r.epsilon, r.l1_error));
    }
    s
}
