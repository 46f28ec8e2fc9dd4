//! Closed-form 2D panel integrals, dense operators and the exterior Neumann solver.

use crate::geometry::PointCloud;
use crate::kernels::{Block, KernelKind};
use crate::{Error, Result};
use nalgebra::{DMatrix, DVector};
use std::f64::consts::PI;

pub use crate::dataset::neumann_to_dirichlet_dataset;

/// Straight panel from `start` along `tau` with length `length`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Panel {
    pub start: [f64; 2],
    pub length: f64,
    pub angle: f64,
    pub tau: [f64; 2],
    pub normal: [f64; 2],
}

impl Panel {
    pub fn new(start: [f64; 2], length: f64, angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Panel {
            start,
            length,
            angle,
            tau: [c, s],
            normal: [s, -c],
        }
    }

    pub fn from_endpoints(a: [f64; 2], b: [f64; 2]) -> Self {
        let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
        Panel::new(a, dx.hypot(dy), dy.atan2(dx))
    }

    /// Panel whose midpoint, normal and length are point `i` of a 2D cloud.
    pub fn from_cloud(cloud: &PointCloud, i: usize) -> Self {
        let p = cloud.point(i);
        let n = cloud.normal(i);
        let tau = [-n[1], n[0]];
        let w = cloud.weights[i];
        Panel {
            start: [p[0] - 0.5 * w * tau[0], p[1] - 0.5 * w * tau[1]],
            length: w,
            angle: tau[1].atan2(tau[0]),
            tau,
            normal: [n[0], n[1]],
        }
    }

    pub fn end(&self) -> [f64; 2] {
        [self.start[0] + self.length * self.tau[0], self.start[1] + self.length * self.tau[1]]
    }

    pub fn midpoint(&self) -> [f64; 2] {
        [
            self.start[0] + 0.5 * self.length * self.tau[0],
            self.start[1] + 0.5 * self.length * self.tau[1],
        ]
    }

    /// Local coordinates `x̃ = Q (x − b)`.
    pub fn local(&self, x: &[f64]) -> (f64, f64) {
        let (dx, dy) = (x[0] - self.start[0], x[1] - self.start[1]);
        (dx * self.tau[0] + dy * self.tau[1], dx * self.normal[0] + dy * self.normal[1])
    }
}

/// Relative tolerance below which `x̃₂` counts as on the panel line.
const ON_LINE_TOL: f64 = 1e-12;

/// Elementary integrals over a panel seen from local point `(a, h)`.
struct Moments {
    /// `½ ln(r₁² / r₂²)` with `r₁` the distance to the start and `r₂` to the end.
    log_ratio: f64,
    /// Signed angle subtended by the panel; zero on the panel line.
    theta: f64,
    /// `∫ ln|x − y| dy`.
    log_int: f64,
    h: f64,
}

fn moments(panel: &Panel, x: &[f64]) -> Result<Moments> {
    let l = panel.length;
    let (a, h_raw) = panel.local(x);
    let bb = l - a;
    let on_line = h_raw.abs() <= ON_LINE_TOL * l;
    let h = if on_line { 0.0 } else { h_raw };
    let r1 = a * a + h * h;
    let r2 = bb * bb + h * h;
    if on_line && (a.abs() <= ON_LINE_TOL * l || bb.abs() <= ON_LINE_TOL * l) {
        return Err(Error::EndpointSingularity(a));
    }
    let theta = if on_line { 0.0 } else { (h * l).atan2(h * h - a * bb) };
    let log_int = 0.5 * bb * r2.ln() + 0.5 * a * r1.ln() - l + h * theta;
    Ok(Moments {
        log_ratio: 0.5 * (r1 / r2).ln(),
        theta,
        log_int,
        h,
    })
}

/// `∫_Γ κ(x − y; n_x, n_y) dy` in closed form.
pub fn panel_integral(kind: KernelKind, panel: &Panel, x: &[f64], n_x: Option<&[f64]>) -> Result<Block> {
    if kind.dims() != 2 {
        return Err(Error::invalid(format!("{kind} is not a 2D kernel")));
    }
    if kind.needs_nx() && n_x.is_none() {
        return Err(Error::invalid(format!("{kind} requires n_x")));
    }
    let m = moments(panel, x)?;
    let (t, n) = (panel.tau, panel.normal);
    let c = 1.0 / (2.0 * PI);
    Ok(match kind {
        KernelKind::SingleLayer2D => Block::scalar(-c * m.log_int),
        KernelKind::DoubleLayer2D => Block::scalar(c * m.theta),
        KernelKind::ModifiedDoubleLayer2D => {
            let mut b = Block::zeros(2, 1);
            for k in 0..2 {
                b.v[k] = c * (m.log_ratio * t[k] + m.theta * n[k]);
            }
            b
        }
        KernelKind::AdjointDoubleLayer2D => {
            let nx = n_x.expect("checked above");
            let v: f64 = (0..2).map(|k| (m.log_ratio * t[k] + m.theta * n[k]) * nx[k]).sum();
            Block::scalar(-c * v)
        }
        KernelKind::Stokeslet2D => {
            let s = -c * m.log_int;
            let l = panel.length;
            let tt = l - m.h * m.theta;
            let tn = m.h * m.log_ratio;
            let nn = m.h * m.theta;
            let mut b = Block::zeros(2, 2);
            for i in 0..2 {
                for j in 0..2 {
                    let iso = if i == j { 0.5 * s } else { 0.0 };
                    let rr = tt * t[i] * t[j] + tn * (t[i] * n[j] + n[i] * t[j]) + nn * n[i] * n[j];
                    b.v[2 * i + j] = iso + rr / (4.0 * PI);
                }
            }
            b
        }
        _ => unreachable!(),
    })
}

/// Dense `(N·d_u) × (N·d_f)` influence matrix, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseOperator {
    pub kind: KernelKind,
    pub n: usize,
    pub matrix: Vec<f64>,
}

impl DenseOperator {
    pub fn rows(&self) -> usize {
        self.n * self.kind.d_u()
    }

    pub fn cols(&self) -> usize {
        self.n * self.kind.d_f()
    }

    pub fn entry(&self, r: usize, c: usize) -> f64 {
        self.matrix[r * self.cols() + c]
    }

    pub fn to_dmatrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows(), self.cols(), &self.matrix)
    }
}

/// Collocate at every unmasked point with `n_x = normals[i]`; masked rows and columns stay zero.
pub fn assemble_dense(kind: KernelKind, cloud: &PointCloud) -> Result<DenseOperator> {
    if cloud.dims != 2 || kind.dims() != 2 {
        return Err(Error::invalid("assemble_dense needs a 2D kernel and a 2D cloud"));
    }
    let n = cloud.len();
    let (du, df) = (kind.d_u(), kind.d_f());
    let panels: Vec<Panel> = (0..n).map(|j| Panel::from_cloud(cloud, j)).collect();
    let row_len = du * n * df;
    let rows = crate::par::try_map_range(n, |i| -> Result<Vec<f64>> {
        let mut row = vec![0.0; row_len];
        if !cloud.mask[i] {
            return Ok(row);
        }
        let x = cloud.point(i);
        let nx = cloud.normal(i);
        for (j, panel) in panels.iter().enumerate() {
            if !cloud.mask[j] {
                continue;
            }
            let b = panel_integral(kind, panel, x, Some(nx))
                .map_err(|e| Error::numerical(format!("panel {j} at point {i}: {e}")))?;
            for r in 0..du {
                for c in 0..df {
                    row[r * n * df + j * df + c] = b.get(r, c);
                }
            }
        }
        Ok(row)
    })?;
    Ok(DenseOperator {
        kind,
        n,
        matrix: rows.concat(),
    })
}

/// `u = A f` with `f` of shape N×d_f and `u` of shape N×d_u.
pub fn apply_dense(op: &DenseOperator, f: &[f64]) -> Result<Vec<f64>> {
    if f.len() != op.cols() {
        return Err(Error::invalid(format!(
            "apply_dense: expected {} input values, got {}",
            op.cols(),
            f.len()
        )));
    }
    let cols = op.cols();
    Ok(crate::par::map_range(op.rows(), |r| {
        op.matrix[r * cols..(r + 1) * cols].iter().zip(f).map(|(a, b)| a * b).sum()
    }))
}

#[derive(Clone, Debug, PartialEq)]
pub struct NeumannSolution {
    pub sigma: Vec<f64>,
    pub phi: Vec<f64>,
}

/// Solve `(−½ I + D*) σ = f` with `Σ w σ = 0`, then `Φ = S σ` on the boundary.
///
/// The side condition is imposed through the bordered system `[A w; wᵀ 0]`.
/// Masked points get `σ = Φ = 0`.
pub fn solve_exterior_neumann(cloud: &PointCloud, f: &[f64]) -> Result<NeumannSolution> {
    let n = cloud.len();
    if f.len() != n {
        return Err(Error::invalid("solve_exterior_neumann: f must have one value per point"));
    }
    let active: Vec<usize> = (0..n).filter(|&i| cloud.mask[i]).collect();
    let m = active.len();
    let net: f64 = active.iter().map(|&i| cloud.weights[i] * f[i]).sum();
    let scale: f64 = active.iter().map(|&i| cloud.weights[i] * f[i].abs()).sum();
    if net.abs() > 1e-6 * scale {
        return Err(Error::invalid(format!(
            "incompatible Neumann data: ∫f = {net:.3e} exceeds 1e-6·∫|f| = {:.3e}",
            1e-6 * scale
        )));
    }
    if scale == 0.0 {
        return Ok(NeumannSolution {
            sigma: vec![0.0; n],
            phi: vec![0.0; n],
        });
    }
    let adl = assemble_dense(KernelKind::AdjointDoubleLayer2D, cloud)?;
    let mut a = DMatrix::<f64>::zeros(m + 1, m + 1);
    for (r, &i) in active.iter().enumerate() {
        for (c, &j) in active.iter().enumerate() {
            a[(r, c)] = adl.entry(i, j);
        }
        a[(r, r)] -= 0.5;
        a[(r, m)] = cloud.weights[i];
        a[(m, r)] = cloud.weights[i];
    }
    let mut rhs = DVector::<f64>::zeros(m + 1);
    for (r, &i) in active.iter().enumerate() {
        rhs[r] = f[i];
    }
    let sol = crate::linalg::lu_solve(a, &rhs)?;
    let mut sigma = vec![0.0; n];
    for (r, &i) in active.iter().enumerate() {
        sigma[i] = sol[r];
    }
    let sl = assemble_dense(KernelKind::SingleLayer2D, cloud)?;
    let phi = apply_dense(&sl, &sigma)?;
    Ok(NeumannSolution { sigma, phi })
}
