//! Curves, point clouds, neighbor graphs, tangential gradients and random fields.

use crate::{Error, Result};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Side length of the square box that holds generated curves.
pub const BOX_SIZE: f64 = 5.0;
/// Minimum distance between a generated curve and the box boundary.
pub const BOX_MARGIN: f64 = 0.25;
/// Minimum distance between the two curves of a two-curve cloud.
pub const TWO_CURVE_GAP: f64 = 0.1;

/// Star-shaped closed curve `r(θ) = R (1 + Σ a_m cos mθ + b_m sin mθ)` around `center`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub fourier_cos: Vec<f64>,
    pub fourier_sin: Vec<f64>,
    pub base_radius: f64,
    pub center: [f64; 2],
    pub n_harmonics: usize,
}

impl Curve {
    pub fn circle(center: [f64; 2], radius: f64) -> Self {
        Curve {
            fourier_cos: Vec::new(),
            fourier_sin: Vec::new(),
            base_radius: radius,
            center,
            n_harmonics: 0,
        }
    }

    /// `(r, r', r'')` at parameter `theta`.
    pub fn radius_derivs(&self, theta: f64) -> (f64, f64, f64) {
        let (mut s0, mut s1, mut s2) = (1.0, 0.0, 0.0);
        for m in 0..self.n_harmonics {
            let k = (m + 1) as f64;
            let (sn, cs) = (k * theta).sin_cos();
            let (a, b) = (self.fourier_cos[m], self.fourier_sin[m]);
            s0 += a * cs + b * sn;
            s1 += k * (-a * sn + b * cs);
            s2 += -k * k * (a * cs + b * sn);
        }
        let r = self.base_radius;
        (r * s0, r * s1, r * s2)
    }

    pub fn radius(&self, theta: f64) -> f64 {
        self.radius_derivs(theta).0
    }

    pub fn point(&self, theta: f64) -> [f64; 2] {
        let r = self.radius(theta);
        let (s, c) = theta.sin_cos();
        [self.center[0] + r * c, self.center[1] + r * s]
    }

    /// Signed curvature of the polar curve (positive for a convex counterclockwise curve).
    pub fn curvature(&self, theta: f64) -> f64 {
        let (r, r1, r2) = self.radius_derivs(theta);
        (r * r + 2.0 * r1 * r1 - r * r2) / (r * r + r1 * r1).powf(1.5)
    }

    /// Minimum and maximum radius on a uniform `samples`-point scan.
    pub fn radius_range(&self, samples: usize) -> (f64, f64) {
        (0..samples)
            .map(|j| self.radius(2.0 * PI * j as f64 / samples as f64))
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r), hi.max(r)))
    }

    /// Smallest distance from the curve to the boundary of `[0, size]²` on a scan.
    pub fn box_clearance(&self, size: f64, samples: usize) -> f64 {
        (0..samples)
            .map(|j| {
                let p = self.point(2.0 * PI * j as f64 / samples as f64);
                p[0].min(p[1]).min(size - p[0]).min(size - p[1])
            })
            .fold(f64::INFINITY, f64::min)
    }
}

/// Distribution of random star-shaped curves.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurveFamily {
    pub n_harmonics: usize,
    /// Harmonic `m` has amplitudes uniform in `±amplitude · m^(−decay)`.
    pub amplitude: f64,
    pub decay: f64,
    pub radius_min: f64,
    pub radius_max: f64,
    pub max_attempts: usize,
}

impl Default for CurveFamily {
    fn default() -> Self {
        CurveFamily {
            n_harmonics: 5,
            amplitude: 0.15,
            decay: 1.0,
            radius_min: 1.0,
            radius_max: 1.9,
            max_attempts: 1000,
        }
    }
}

impl CurveFamily {
    /// Smaller curves used for the two-curve layouts.
    pub fn two_curve() -> Self {
        CurveFamily {
            radius_min: 0.45,
            radius_max: 0.8,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        let bound: f64 = (1..=self.n_harmonics)
            .map(|m| self.amplitude * (m as f64).powf(-self.decay))
            .sum::<f64>()
            * 2f64.sqrt();
        if !(self.amplitude >= 0.0 && bound < 1.0) {
            return Err(Error::invalid(format!(
                "curve family amplitudes too large: worst-case perturbation {bound:.3} >= 1"
            )));
        }
        if !(0.0 < self.radius_min && self.radius_min <= self.radius_max) {
            return Err(Error::invalid("curve family radius range is empty"));
        }
        Ok(())
    }

    fn draw_shape(&self, rng: &mut ChaCha8Rng) -> Curve {
        let mut cos = Vec::with_capacity(self.n_harmonics);
        let mut sin = Vec::with_capacity(self.n_harmonics);
        for m in 1..=self.n_harmonics {
            let a = self.amplitude * (m as f64).powf(-self.decay);
            cos.push(if a > 0.0 { rng.random_range(-a..=a) } else { 0.0 });
            sin.push(if a > 0.0 { rng.random_range(-a..=a) } else { 0.0 });
        }
        let base_radius = if self.radius_max > self.radius_min {
            rng.random_range(self.radius_min..self.radius_max)
        } else {
            self.radius_min
        };
        Curve {
            fourier_cos: cos,
            fourier_sin: sin,
            base_radius,
            center: [0.0, 0.0],
            n_harmonics: self.n_harmonics,
        }
    }
}

const SCAN: usize = 720;

fn curve_ok(c: &Curve, margin: f64) -> bool {
    c.radius_range(SCAN).0 > 0.0 && c.box_clearance(BOX_SIZE, SCAN) >= margin
}

/// Draw a random curve inside `[0, 5]²` with margin `0.25`.
pub fn generate_random_curve(seed: u64, family: &CurveFamily) -> Result<Curve> {
    family.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..family.max_attempts.max(1) {
        let mut c = family.draw_shape(&mut rng);
        let (_, rmax) = c.radius_range(SCAN);
        let lo = BOX_MARGIN + rmax;
        let hi = BOX_SIZE - BOX_MARGIN - rmax;
        if lo >= hi {
            continue;
        }
        c.center = [rng.random_range(lo..hi), rng.random_range(lo..hi)];
        if curve_ok(&c, BOX_MARGIN) {
            return Ok(c);
        }
    }
    Err(Error::RetryBudget {
        attempts: family.max_attempts,
        reason: "curve does not fit the box".into(),
    })
}

/// Two disjoint curves side by side, left one in `x < 2.5`, right one in `x > 2.5`.
pub fn generate_two_curves(seed: u64, family: &CurveFamily) -> Result<[Curve; 2]> {
    family.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = 0.5 * BOX_SIZE;
    'attempt: for _ in 0..family.max_attempts.max(1) {
        let mut pair = [family.draw_shape(&mut rng), family.draw_shape(&mut rng)];
        for (side, c) in pair.iter_mut().enumerate() {
            let (_, rmax) = c.radius_range(SCAN);
            let x0 = side as f64 * half;
            let (xlo, xhi) = (x0 + BOX_MARGIN + rmax, x0 + half - rmax);
            let (ylo, yhi) = (BOX_MARGIN + rmax, BOX_SIZE - BOX_MARGIN - rmax);
            if xlo >= xhi || ylo >= yhi {
                continue 'attempt;
            }
            c.center = [rng.random_range(xlo..xhi), rng.random_range(ylo..yhi)];
            if !curve_ok(c, BOX_MARGIN) {
                continue 'attempt;
            }
        }
        if curve_distance(&pair[0], &pair[1], SCAN) > TWO_CURVE_GAP {
            return Ok(pair);
        }
    }
    Err(Error::RetryBudget {
        attempts: family.max_attempts,
        reason: "two curves not disjoint inside the box".into(),
    })
}

/// Minimum distance between `samples`-point scans of two curves.
pub fn curve_distance(a: &Curve, b: &Curve, samples: usize) -> f64 {
    let pa: Vec<_> = (0..samples).map(|j| a.point(2.0 * PI * j as f64 / samples as f64)).collect();
    let pb: Vec<_> = (0..samples).map(|j| b.point(2.0 * PI * j as f64 / samples as f64)).collect();
    let mut best = f64::INFINITY;
    for p in &pa {
        for q in &pb {
            best = best.min((p[0] - q[0]).hypot(p[1] - q[1]));
        }
    }
    best
}

/// Discretized boundary: one entry per panel (2D) or facet (3D).
///
/// All per-point arrays are row-major with `dims` columns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub dims: usize,
    pub points: Vec<f64>,
    pub normals: Vec<f64>,
    /// Unit tangents in 2D; empty in 3D.
    pub tangents: Vec<f64>,
    pub weights: Vec<f64>,
    pub curvature: Vec<f64>,
    pub mask: Vec<bool>,
    /// Connected component (closed curve or body) of each point.
    pub component: Vec<u32>,
    pub neighbors: Vec<Vec<usize>>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn n_active(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dims..(i + 1) * self.dims]
    }

    pub fn normal(&self, i: usize) -> &[f64] {
        &self.normals[i * self.dims..(i + 1) * self.dims]
    }

    pub fn tangent(&self, i: usize) -> [f64; 2] {
        [self.tangents[2 * i], self.tangents[2 * i + 1]]
    }

    pub fn n_components(&self) -> usize {
        let mut seen: Vec<u32> = (0..self.len())
            .filter(|&i| self.mask[i])
            .map(|i| self.component[i])
            .collect();
        seen.sort_unstable();
        seen.dedup();
        seen.len()
    }

    /// Construct from raw 3D facet data (centroids, unit normals, areas).
    pub fn from_facets(points: Vec<f64>, normals: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        let n = weights.len();
        if points.len() != 3 * n || normals.len() != 3 * n {
            return Err(Error::invalid("facet arrays have inconsistent lengths"));
        }
        Ok(PointCloud {
            dims: 3,
            points,
            normals,
            tangents: Vec::new(),
            weights,
            curvature: vec![0.0; n],
            mask: vec![true; n],
            component: vec![0; n],
            neighbors: vec![Vec::new(); n],
        })
    }

    /// Concatenate clouds; component ids are renumbered so they stay distinct.
    pub fn concat(parts: &[PointCloud]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::invalid("no clouds to concatenate"))?;
        let dims = first.dims;
        let mut out = PointCloud {
            dims,
            points: Vec::new(),
            normals: Vec::new(),
            tangents: Vec::new(),
            weights: Vec::new(),
            curvature: Vec::new(),
            mask: Vec::new(),
            component: Vec::new(),
            neighbors: Vec::new(),
        };
        let mut comp_base = 0u32;
        for p in parts {
            if p.dims != dims {
                return Err(Error::invalid("cannot concatenate clouds of different dimension"));
            }
            let offset = out.len();
            out.points.extend_from_slice(&p.points);
            out.normals.extend_from_slice(&p.normals);
            out.tangents.extend_from_slice(&p.tangents);
            out.weights.extend_from_slice(&p.weights);
            out.curvature.extend_from_slice(&p.curvature);
            out.mask.extend_from_slice(&p.mask);
            out.component.extend(p.component.iter().map(|c| c + comp_base));
            out.neighbors
                .extend(p.neighbors.iter().map(|l| l.iter().map(|j| j + offset).collect::<Vec<_>>()));
            comp_base += p.component.iter().max().map_or(0, |m| m + 1);
        }
        Ok(out)
    }

    /// Zero-pad to `n_max` slots.
    pub fn pad(&self, n_max: usize) -> Result<Self> {
        let n = self.len();
        if n > n_max {
            return Err(Error::invalid(format!("cloud has {n} points, more than N_max = {n_max}")));
        }
        let extra = n_max - n;
        let d = self.dims;
        let mut out = self.clone();
        out.points.extend(std::iter::repeat_n(0.0, extra * d));
        out.normals.extend(std::iter::repeat_n(0.0, extra * d));
        if !out.tangents.is_empty() {
            out.tangents.extend(std::iter::repeat_n(0.0, extra * d));
        }
        out.weights.extend(std::iter::repeat_n(0.0, extra));
        out.curvature.extend(std::iter::repeat_n(0.0, extra));
        out.mask.extend(std::iter::repeat_n(false, extra));
        out.component.extend(std::iter::repeat_n(0, extra));
        out.neighbors.extend(std::iter::repeat_n(Vec::new(), extra));
        Ok(out)
    }

    /// Reorder points so that new slot `i` holds old point `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Self {
        let n = self.len();
        let d = self.dims;
        let mut inv = vec![0usize; n];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        let rows = |src: &[f64]| -> Vec<f64> {
            if src.is_empty() {
                return Vec::new();
            }
            perm.iter().flat_map(|&p| src[p * d..(p + 1) * d].iter().copied()).collect()
        };
        PointCloud {
            dims: d,
            points: rows(&self.points),
            normals: rows(&self.normals),
            tangents: rows(&self.tangents),
            weights: perm.iter().map(|&p| self.weights[p]).collect(),
            curvature: perm.iter().map(|&p| self.curvature[p]).collect(),
            mask: perm.iter().map(|&p| self.mask[p]).collect(),
            component: perm.iter().map(|&p| self.component[p]).collect(),
            neighbors: perm
                .iter()
                .map(|&p| self.neighbors[p].iter().map(|&j| inv[j]).collect())
                .collect(),
        }
    }

    /// `Σ w_i n_i`, which vanishes for a closed polygon.
    pub fn weighted_normal_sum(&self) -> Vec<f64> {
        let d = self.dims;
        let mut s = vec![0.0; d];
        for i in 0..self.len() {
            for a in 0..d {
                s[a] += self.weights[i] * self.normals[i * d + a];
            }
        }
        s
    }

    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// Panel discretization with `n` panels between the nodes `θ_j = 2πj/n`.
///
/// Point `i` is the midpoint of the chord from node `i` to node `i+1`, so normals,
/// tangents and weights describe the panel exactly. Curvature is the analytic
/// curve value at the mid-parameter.
pub fn discretize_curve(curve: &Curve, n: usize) -> Result<PointCloud> {
    if n < 16 {
        return Err(Error::invalid(format!("discretize_curve needs N >= 16, got {n}")));
    }
    let nodes: Vec<[f64; 2]> = (0..n).map(|j| curve.point(2.0 * PI * j as f64 / n as f64)).collect();
    let mut points = Vec::with_capacity(2 * n);
    let mut normals = Vec::with_capacity(2 * n);
    let mut tangents = Vec::with_capacity(2 * n);
    let mut weights = Vec::with_capacity(n);
    let mut curvature = Vec::with_capacity(n);
    for i in 0..n {
        let a = nodes[i];
        let b = nodes[(i + 1) % n];
        let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
        let len = dx.hypot(dy);
        if len <= 0.0 {
            return Err(Error::numerical(format!("degenerate panel {i}")));
        }
        let t = [dx / len, dy / len];
        points.extend_from_slice(&[0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1])]);
        tangents.extend_from_slice(&t);
        normals.extend_from_slice(&[t[1], -t[0]]);
        weights.push(len);
        curvature.push(curve.curvature(2.0 * PI * (i as f64 + 0.5) / n as f64));
    }
    Ok(PointCloud {
        dims: 2,
        points,
        normals,
        tangents,
        weights,
        curvature,
        mask: vec![true; n],
        component: vec![0; n],
        neighbors: vec![Vec::new(); n],
    })
}

/// Default neighbor count `2d + 2`.
pub fn default_k(dims: usize) -> usize {
    2 * dims + 2
}

/// Discretized single random curve with neighbor lists.
pub fn make_single_curve_cloud(seed: u64, n: usize, family: &CurveFamily) -> Result<PointCloud> {
    let c = generate_random_curve(seed, family)?;
    build_neighbor_lists(&discretize_curve(&c, n)?, default_k(2))
}

/// Two random curves, `n_each` panels each, concatenated with per-curve neighbor lists.
pub fn make_two_curve_cloud(seed: u64, n_each: usize, family: &CurveFamily) -> Result<PointCloud> {
    let [a, b] = generate_two_curves(seed, family)?;
    two_curve_cloud_from(&a, &b, n_each)
}

pub fn two_curve_cloud_from(a: &Curve, b: &Curve, n_each: usize) -> Result<PointCloud> {
    let cloud = PointCloud::concat(&[discretize_curve(a, n_each)?, discretize_curve(b, n_each)?])?;
    build_neighbor_lists(&cloud, default_k(2))
}

/// k nearest unmasked points of the same component.
///
/// Ties are broken by coordinates, so the lists do not depend on point order.
pub fn build_neighbor_lists(cloud: &PointCloud, k: usize) -> Result<PointCloud> {
    let d = cloud.dims;
    if k < d + 1 {
        return Err(Error::invalid(format!("k = {k} must be at least d + 1 = {}", d + 1)));
    }
    let n = cloud.len();
    let lists = crate::par::try_map_range(n, |i| {
        if !cloud.mask[i] {
            return Ok(Vec::new());
        }
        let xi = cloud.point(i);
        let mut cand: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i && cloud.mask[j] && cloud.component[j] == cloud.component[i])
            .map(|j| {
                let xj = cloud.point(j);
                (xi.iter().zip(xj).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(), j)
            })
            .collect();
        if cand.len() < k {
            return Err(Error::invalid(format!(
                "point {i} has only {} candidate neighbors, need {k}",
                cand.len()
            )));
        }
        cand.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| lex_cmp(cloud.point(a.1), cloud.point(b.1))));
        Ok(cand[..k].iter().map(|&(_, j)| j).collect())
    })?;
    let mut out = cloud.clone();
    out.neighbors = lists;
    Ok(out)
}

/// Lexicographic comparison of coordinate rows.
pub fn lex_cmp(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(std::cmp::Ordering::Equal)
}

/// Precomputed linear least-squares gradient operator.
///
/// `∇_D f(x_i) ≈ Σ_j c_ij f_j` over the neighbors of `i` and `i` itself.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientStencil {
    pub dims: usize,
    /// CSR row offsets into `cols` / `coefs`.
    pub offsets: Vec<usize>,
    pub cols: Vec<usize>,
    /// `dims` coefficients per entry.
    pub coefs: Vec<f64>,
}

impl GradientStencil {
    pub fn build(cloud: &PointCloud) -> Result<Self> {
        let d = cloud.dims;
        let n = cloud.len();
        let rows = crate::par::try_map_range(n, |i| -> Result<Vec<(usize, Vec<f64>)>> {
            let nb = &cloud.neighbors[i];
            if !cloud.mask[i] || nb.is_empty() {
                return Ok(Vec::new());
            }
            let xi = cloud.point(i);
            let mut a = DMatrix::<f64>::zeros(nb.len(), d);
            for (r, &j) in nb.iter().enumerate() {
                for c in 0..d {
                    a[(r, c)] = cloud.point(j)[c] - xi[c];
                }
            }
            let mut ata = a.transpose() * &a;
            let lambda = 1e-8 * ata.trace();
            for c in 0..d {
                ata[(c, c)] += lambda;
            }
            let chol = ata.cholesky().ok_or(Error::SingularStencil(i))?;
            let nrm = cloud.normal(i);
            let mut proj = DMatrix::<f64>::identity(d, d);
            for r in 0..d {
                for c in 0..d {
                    proj[(r, c)] -= nrm[r] * nrm[c];
                }
            }
            // Row r of (P (AᵀA+λI)⁻¹ Aᵀ) gives the coefficient vectors.
            let m = &proj * chol.solve(&a.transpose());
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::SingularStencil(i));
            }
            let mut entries = Vec::with_capacity(nb.len() + 1);
            let mut self_coef = vec![0.0; d];
            for (r, &j) in nb.iter().enumerate() {
                let col: Vec<f64> = (0..d).map(|c| m[(c, r)]).collect();
                for c in 0..d {
                    self_coef[c] -= col[c];
                }
                entries.push((j, col));
            }
            entries.push((i, self_coef));
            Ok(entries)
        })?;
        let mut offsets = Vec::with_capacity(n + 1);
        let mut cols = Vec::new();
        let mut coefs = Vec::new();
        offsets.push(0);
        for row in rows {
            for (j, c) in row {
                cols.push(j);
                coefs.extend(c);
            }
            offsets.push(cols.len());
        }
        Ok(GradientStencil { dims: d, offsets, cols, coefs })
    }

    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Gradient of `values` (N×c): output N×(c·d), channel-major per point.
    pub fn apply(&self, values: &[f64], c: usize) -> Vec<f64> {
        let d = self.dims;
        let n = self.len();
        let mut out = vec![0.0; n * c * d];
        crate::par::for_each_row(&mut out, c * d, |i, row| {
            for e in self.offsets[i]..self.offsets[i + 1] {
                let j = self.cols[e];
                let coef = &self.coefs[e * d..(e + 1) * d];
                for ch in 0..c {
                    let v = values[j * c + ch];
                    for a in 0..d {
                        row[ch * d + a] += coef[a] * v;
                    }
                }
            }
        });
        out
    }

    /// Adjoint of [`apply`](Self::apply): maps N×(c·d) back to N×c.
    pub fn apply_transpose(&self, grad_out: &[f64], c: usize) -> Vec<f64> {
        let d = self.dims;
        let mut out = vec![0.0; self.len() * c];
        for i in 0..self.len() {
            let g = &grad_out[i * c * d..(i + 1) * c * d];
            for e in self.offsets[i]..self.offsets[i + 1] {
                let j = self.cols[e];
                let coef = &self.coefs[e * d..(e + 1) * d];
                for ch in 0..c {
                    let mut s = 0.0;
                    for a in 0..d {
                        s += coef[a] * g[ch * d + a];
                    }
                    out[j * c + ch] += s;
                }
            }
        }
        out
    }
}

/// Least-squares tangential gradient of `values` (N×c); output N×(c·d).
pub fn tangential_gradient(cloud: &PointCloud, values: &[f64], c: usize) -> Result<Vec<f64>> {
    if values.len() != cloud.len() * c {
        return Err(Error::invalid("tangential_gradient: values shape mismatch"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("tangential_gradient: non-finite values"));
    }
    if cloud.neighbors.iter().zip(&cloud.mask).any(|(l, &m)| m && l.is_empty()) {
        return Err(Error::invalid("tangential_gradient: neighbor lists not built"));
    }
    Ok(GradientStencil::build(cloud)?.apply(values, c))
}

/// `x / (1 + |x|)` componentwise.
pub fn softsign(values: &[f64]) -> Vec<f64> {
    values.iter().map(|&x| softsign_scalar(x)).collect()
}

pub fn softsign_scalar(x: f64) -> f64 {
    x / (1.0 + x.abs())
}

/// Random Fourier series along each closed curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrfSpec {
    pub n_modes: usize,
    pub decay_exponent: f64,
    pub amplitude: f64,
    pub seed: u64,
    pub channels: usize,
}

impl Default for GrfSpec {
    fn default() -> Self {
        GrfSpec {
            n_modes: 16,
            decay_exponent: 2.0,
            amplitude: 1.0,
            seed: 0,
            channels: 1,
        }
    }
}

/// Sample a field with mode variances `(1+k²)^(−s)` in normalized arclength per component.
pub fn sample_grf(cloud: &PointCloud, spec: &GrfSpec) -> Result<Vec<f64>> {
    if spec.decay_exponent <= 0.5 {
        return Err(Error::invalid("GRF decay exponent must exceed 1/2"));
    }
    if cloud.dims != 2 {
        return Err(Error::invalid("sample_grf expects a 2D curve cloud"));
    }
    let n = cloud.len();
    let c = spec.channels.max(1);
    let mut out = vec![0.0; n * c];
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n_comp = cloud.component.iter().zip(&cloud.mask).filter(|(_, &m)| m).map(|(&k, _)| k + 1).max().unwrap_or(0);
    for comp in 0..n_comp {
        let idx: Vec<usize> = (0..n).filter(|&i| cloud.mask[i] && cloud.component[i] == comp).collect();
        let total: f64 = idx.iter().map(|&i| cloud.weights[i]).sum();
        let mut acc = 0.0;
        let s: Vec<f64> = idx
            .iter()
            .map(|&i| {
                let v = (acc + 0.5 * cloud.weights[i]) / total;
                acc += cloud.weights[i];
                v
            })
            .collect();
        for ch in 0..c {
            let a0: f64 = rng.sample(StandardNormal);
            let mut coeffs = Vec::with_capacity(spec.n_modes);
            for k in 1..=spec.n_modes {
                let sd = (1.0 + (k * k) as f64).powf(-0.5 * spec.decay_exponent);
                let a: f64 = rng.sample(StandardNormal);
                let b: f64 = rng.sample(StandardNormal);
                coeffs.push((sd * a, sd * b));
            }
            for (&i, &si) in idx.iter().zip(&s) {
                let mut v = a0;
                for (k, &(a, b)) in coeffs.iter().enumerate() {
                    let (sn, cs) = (2.0 * PI * (k + 1) as f64 * si).sin_cos();
                    v += a * cs + b * sn;
                }
                out[i * c + ch] = spec.amplitude * v;
            }
        }
    }
    Ok(out)
}

/// Remove the quadrature-weighted mean of a scalar field, per component.
pub fn remove_weighted_mean(cloud: &PointCloud, values: &mut [f64]) {
    let w: f64 = cloud.weights.iter().sum();
    if w <= 0.0 {
        return;
    }
    let m: f64 = values.iter().zip(&cloud.weights).map(|(v, w)| v * w).sum::<f64>() / w;
    for (v, &active) in values.iter_mut().zip(&cloud.mask) {
        if active {
            *v -= m;
        }
    }
}

/// Polar angle of every point about `center`, in `[0, 2π)`.
pub fn polar_angles(cloud: &PointCloud, center: [f64; 2]) -> Vec<f64> {
    (0..cloud.len())
        .map(|i| {
            let p = cloud.point(i);
            (p[1] - center[1]).atan2(p[0] - center[0]).rem_euclid(2.0 * PI)
        })
        .collect()
}
