//! Multiscale point cloud neural operator (M-PCNO).
//!
//! Parameters live in one flat vector described by a [`Layout`]; gradients use the
//! same layout. Fourier weights are stored for half of the mode set (the zero mode
//! plus every lexicographically positive `k`); the mode `−k` carries the complex
//! conjugate, so every layer output is real.
//!
//! Two architectures share the layer code:
//!
//! * `Deep`: GeLU lifting, residual layers `f + GeLU(K_long f + K_short f)` with the
//!   factorized long-range form, and a two-layer projection.
//! * `Linear`: one residual layer without activation, identity lifting (zero padded)
//!   and channel selection as projection. The long-range part uses per-mode weights
//!   `W_v1`, `W_v2` (on `f ⊗ n_y`) and `W_v3` (contracted with `n_x`) directly, so
//!   the output is linear in every parameter.
//!
//! Per-point arrays are row-major `N × channels`. Padded points (mask false) carry
//! zero rows at every stage.

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::geometry::{build_neighbor_lists, default_k, lex_cmp, softsign_scalar, GradientStencil, PointCloud};
use crate::{Error, Result};

/// Default half side of the Fourier box for 2D clouds in `[0, 5]²`.
pub const DEFAULT_BOX_2D: f64 = 5.0;
/// Default half side of the Fourier box for 3D bodies inside `[−1, 1]³`.
pub const DEFAULT_BOX_3D: f64 = 2.0;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);
const CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainMode {
    /// Functions on a curve or surface; normals enter both parts of each layer.
    Boundary,
    /// Functions on a volume; no normal terms.
    Volume,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Deep,
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub dims: usize,
    /// Input channels `d_a`.
    pub d_a: usize,
    /// Output channels `d_u`.
    pub d_u: usize,
    /// Hidden width `d_f`.
    pub width: usize,
    pub layers: usize,
    /// Fourier truncation `‖k‖_∞ ≤ p`.
    pub p: usize,
    /// Hidden width of the projection (deep only).
    pub proj_hidden: usize,
    pub mode: DomainMode,
    pub arch: Architecture,
    /// Half side lengths `l` of the Fourier box; basis `e^(iπ k·x/l)`.
    pub box_half: Vec<f64>,
    /// Linear model: include the `W_v2 (f ⊗ n_y)` modes.
    #[serde(default)]
    pub source_normal: bool,
    /// Linear model: include the `W_v3 (f ⊗ n_x)` modes.
    #[serde(default)]
    pub target_normal: bool,
}

impl ModelConfig {
    fn default_box(dims: usize) -> Vec<f64> {
        let l = if dims == 3 { DEFAULT_BOX_3D } else { DEFAULT_BOX_2D };
        vec![l; dims]
    }

    pub fn deep(dims: usize, d_a: usize, d_u: usize, width: usize, layers: usize, p: usize) -> Self {
        ModelConfig {
            dims,
            d_a,
            d_u,
            width,
            layers,
            p,
            proj_hidden: 2 * width,
            mode: DomainMode::Boundary,
            arch: Architecture::Deep,
            box_half: Self::default_box(dims),
            source_normal: false,
            target_normal: false,
        }
    }

    pub fn linear(dims: usize, d_a: usize, d_u: usize, p: usize) -> Self {
        ModelConfig {
            dims,
            d_a,
            d_u,
            width: d_a.max(d_u),
            layers: 1,
            p,
            proj_hidden: 0,
            mode: DomainMode::Boundary,
            arch: Architecture::Linear,
            box_half: Self::default_box(dims),
            source_normal: false,
            target_normal: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims != 2 && self.dims != 3 {
            return Err(Error::invalid(format!("dims must be 2 or 3, got {}", self.dims)));
        }
        if self.d_a == 0 || self.d_u == 0 || self.width == 0 || self.layers == 0 {
            return Err(Error::invalid("d_a, d_u, width and layers must be positive"));
        }
        if self.box_half.len() != self.dims || self.box_half.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
            return Err(Error::invalid("box_half needs one positive length per dimension"));
        }
        match self.arch {
            Architecture::Deep => {
                if self.proj_hidden == 0 {
                    return Err(Error::invalid("proj_hidden must be positive"));
                }
            }
            Architecture::Linear => {
                if self.layers != 1 {
                    return Err(Error::invalid("the linear model has exactly one layer"));
                }
                if self.width < self.d_a.max(self.d_u) {
                    return Err(Error::invalid("linear model width must be at least max(d_a, d_u)"));
                }
            }
        }
        Ok(())
    }

    /// Full mode count `(2p+1)^d`.
    pub fn n_modes(&self) -> usize {
        (2 * self.p + 1).pow(self.dims as u32)
    }

    /// Stored modes: `((2p+1)^d + 1) / 2`.
    pub fn n_half_modes(&self) -> usize {
        self.n_modes().div_ceil(2)
    }

    /// Width of `[n_x; ∇_D n_x]`.
    pub fn n_normal_feats(&self) -> usize {
        self.dims + self.dims * self.dims
    }

    fn boundary(&self) -> bool {
        self.mode == DomainMode::Boundary
    }

    fn is_linear(&self) -> bool {
        self.arch == Architecture::Linear
    }
}

/// Half mode set: zero first, then lexicographically positive `k`, in lexicographic order.
pub fn half_modes(p: usize, dims: usize) -> Vec<[i64; 3]> {
    let side = 2 * p as i64 + 1;
    let total = side.pow(dims as u32);
    let mut out = vec![[0i64; 3]];
    for idx in 0..total {
        let mut k = [0i64; 3];
        let mut r = idx;
        for a in (0..dims).rev() {
            k[a] = r % side - p as i64;
            r /= side;
        }
        if k[..dims].iter().find(|&&v| v != 0).is_some_and(|&v| v > 0) {
            out.push(k);
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Matrix,
    Bias,
    /// Half-spectrum complex weights, `rows × cols` per mode.
    Fourier,
}

/// A named slice `theta[offset..offset+len]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub name: String,
    pub kind: BlockKind,
    pub offset: usize,
    pub len: usize,
    pub rows: usize,
    pub cols: usize,
}

impl ParamBlock {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }
}

/// Offset of mode `m` inside a Fourier block: `m = 0` is real, the rest store
/// the real part then the imaginary part.
fn fourier_offset(rows: usize, cols: usize, m: usize) -> usize {
    if m == 0 {
        0
    } else {
        rows * cols * (2 * m - 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerLayout {
    /// `W_v1^k`.
    pub fourier: ParamBlock,
    /// Linear model: `W_v2^k`, `d_f × d_f d`.
    pub v2: Option<ParamBlock>,
    /// Linear model: `W_v3^k`, `d_f d × d_f` (row `o·d + a` pairs with `n_x,a`).
    pub v3: Option<ParamBlock>,
    /// Factorized form: `W1`, `W2` (`d_f × d_f(d+1)`) and `W3` (`d_f × d_f`).
    pub w1: Option<ParamBlock>,
    pub w2: Option<ParamBlock>,
    pub w3: Option<ParamBlock>,
    pub wl: ParamBlock,
    pub b: ParamBlock,
    pub wg1: ParamBlock,
    /// Deep: `d_f × d_f`. Linear: `d_f × d_f·(d + d²)`, one block per normal feature.
    pub wg2: Option<ParamBlock>,
    pub wg3: Option<ParamBlock>,
    pub wg4: Option<ParamBlock>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    /// Lifting `W`, `b` (deep only).
    pub lift: Option<[ParamBlock; 2]>,
    pub layers: Vec<LayerLayout>,
    /// Projection `W`, `b`, `W′`, `b′` (deep only).
    pub proj: Option<[ParamBlock; 4]>,
    pub len: usize,
}

struct LayoutBuilder {
    offset: usize,
    n_modes: usize,
}

impl LayoutBuilder {
    fn block(&mut self, name: String, kind: BlockKind, rows: usize, cols: usize) -> ParamBlock {
        let len = match kind {
            BlockKind::Fourier => rows * cols * self.n_modes,
            _ => rows * cols,
        };
        let b = ParamBlock { name, kind, offset: self.offset, len, rows, cols };
        self.offset += len;
        b
    }

    fn matrix(&mut self, name: String, rows: usize, cols: usize) -> ParamBlock {
        self.block(name, BlockKind::Matrix, rows, cols)
    }
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let (d, w) = (cfg.dims, cfg.width);
        let nf = cfg.n_normal_feats();
        let bnd = cfg.boundary();
        let mut lb = LayoutBuilder { offset: 0, n_modes: cfg.n_modes() };
        let lift = (!cfg.is_linear()).then(|| {
            [
                lb.matrix("lift.w".into(), w, cfg.d_a + 2 * d),
                lb.block("lift.b".into(), BlockKind::Bias, w, 1),
            ]
        });
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let name = |s: &str| format!("layer{l}.{s}");
            let fourier = lb.block(name("fourier"), BlockKind::Fourier, w, w);
            let lin = cfg.is_linear();
            let v2 = (lin && bnd && cfg.source_normal).then(|| lb.block(name("v2"), BlockKind::Fourier, w, w * d));
            let v3 = (lin && bnd && cfg.target_normal).then(|| lb.block(name("v3"), BlockKind::Fourier, w * d, w));
            let fact = !lin && bnd;
            let w1 = fact.then(|| lb.matrix(name("w1"), w, w * (d + 1)));
            let w2 = fact.then(|| lb.matrix(name("w2"), w, w * (d + 1)));
            let w3 = fact.then(|| lb.matrix(name("w3"), w, w));
            let wl = lb.matrix(name("wl"), w, w);
            let b = lb.block(name("b"), BlockKind::Bias, w, 1);
            let wg1 = lb.matrix(name("wg1"), w, w * d);
            let wg2 = bnd.then(|| if lin { lb.matrix(name("wg2"), w, w * nf) } else { lb.matrix(name("wg2"), w, w) });
            let wg3 = fact.then(|| lb.matrix(name("wg3"), w, nf));
            let wg4 = fact.then(|| lb.matrix(name("wg4"), w, w));
            layers.push(LayerLayout { fourier, v2, v3, w1, w2, w3, wl, b, wg1, wg2, wg3, wg4 });
        }
        let proj = (!cfg.is_linear()).then(|| {
            let h = cfg.proj_hidden;
            [
                lb.matrix("proj.w".into(), h, w),
                lb.block("proj.b".into(), BlockKind::Bias, h, 1),
                lb.matrix("proj.w_out".into(), cfg.d_u, h),
                lb.block("proj.b_out".into(), BlockKind::Bias, cfg.d_u, 1),
            ]
        });
        Ok(Layout { lift, layers, proj, len: lb.offset })
    }

    /// Every block in storage order.
    pub fn blocks(&self) -> Vec<&ParamBlock> {
        let mut out: Vec<&ParamBlock> = Vec::new();
        if let Some(l) = &self.lift {
            out.extend(l.iter());
        }
        for l in &self.layers {
            out.push(&l.fourier);
            out.extend(l.v2.iter().chain(&l.v3).chain(&l.w1).chain(&l.w2).chain(&l.w3));
            out.extend([&l.wl, &l.b, &l.wg1]);
            out.extend(l.wg2.iter().chain(&l.wg3).chain(&l.wg4));
        }
        if let Some(p) = &self.proj {
            out.extend(p.iter());
        }
        out.sort_by_key(|b| b.offset);
        out
    }
}

/// Model configuration plus the flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub layout: Layout,
    pub theta: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        let layout = Layout::new(&config)?;
        let theta = vec![0.0; layout.len];
        Ok(ModelParams { config, layout, theta })
    }

    /// Fourier weights `~ N(0, 1/((2p+1)^d d_f))`, matrices `~ N(0, 1/fan_in)`, biases 0.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut mp = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fourier_sd = (1.0 / (mp.config.n_modes() * mp.config.width) as f64).sqrt();
        let blocks: Vec<ParamBlock> = mp.layout.blocks().into_iter().cloned().collect();
        for b in blocks {
            let sd = match b.kind {
                BlockKind::Bias => continue,
                BlockKind::Fourier => fourier_sd,
                BlockKind::Matrix => (1.0 / b.cols as f64).sqrt(),
            };
            let dist = Normal::new(0.0, sd).map_err(|e| Error::invalid(e.to_string()))?;
            for v in &mut mp.theta[b.range()] {
                *v = dist.sample(&mut rng);
            }
        }
        Ok(mp)
    }

    pub fn from_theta(config: ModelConfig, theta: Vec<f64>) -> Result<Self> {
        let layout = Layout::new(&config)?;
        if theta.len() != layout.len {
            return Err(Error::invalid(format!("expected {} parameters, got {}", layout.len, theta.len())));
        }
        Ok(ModelParams { config, layout, theta })
    }

    pub fn n_params(&self) -> usize {
        self.theta.len()
    }

    pub fn block(&self, b: &ParamBlock) -> &[f64] {
        &self.theta[b.range()]
    }

    pub fn block_mut(&mut self, b: &ParamBlock) -> &mut [f64] {
        let r = b.range();
        &mut self.theta[r]
    }

    pub fn layer(&self, l: usize) -> LayerParams<'_> {
        LayerParams { config: &self.config, layout: &self.layout.layers[l], theta: &self.theta }
    }

    /// Set mode `k` of a Fourier block; `−k` follows as the conjugate.
    pub fn set_fourier_mode(&mut self, b: &ParamBlock, k: &[i64], value: &[Complex64]) -> Result<()> {
        let modes = half_modes(self.config.p, self.config.dims);
        let d = self.config.dims;
        let (m, conj) = find_mode(&modes, k, d).ok_or_else(|| Error::invalid("mode outside the truncation"))?;
        if value.len() != b.rows * b.cols {
            return Err(Error::invalid("Fourier mode value has wrong size"));
        }
        let off = b.offset + fourier_offset(b.rows, b.cols, m);
        let rc = b.rows * b.cols;
        for (e, v) in value.iter().enumerate() {
            let v = if conj { v.conj() } else { *v };
            self.theta[off + e] = v.re;
            if m > 0 {
                self.theta[off + rc + e] = v.im;
            } else if v.im != 0.0 {
                return Err(Error::invalid("the zero mode must be real"));
            }
        }
        Ok(())
    }

    /// All `(2p+1)^d` modes of a Fourier block as complex `rows × cols` matrices,
    /// in lexicographic order of `k`.
    pub fn full_spectrum(&self, b: &ParamBlock) -> Vec<(Vec<i64>, Vec<Complex64>)> {
        let (p, d) = (self.config.p, self.config.dims);
        let modes = half_modes(p, d);
        let side = 2 * p as i64 + 1;
        let rc = b.rows * b.cols;
        (0..side.pow(d as u32))
            .map(|idx| {
                let mut k = vec![0i64; d];
                let mut r = idx;
                for a in (0..d).rev() {
                    k[a] = r % side - p as i64;
                    r /= side;
                }
                let (m, conj) = find_mode(&modes, &k, d).unwrap_or((0, false));
                let off = b.offset + fourier_offset(b.rows, b.cols, m);
                let vals = (0..rc)
                    .map(|e| {
                        let im = if m > 0 { self.theta[off + rc + e] } else { 0.0 };
                        let z = Complex64::new(self.theta[off + e], im);
                        if conj {
                            z.conj()
                        } else {
                            z
                        }
                    })
                    .collect();
                (k, vals)
            })
            .collect()
    }
}

/// Index of `k` or `−k` in the half set, and whether it was the mirrored one.
fn find_mode(modes: &[[i64; 3]], k: &[i64], d: usize) -> Option<(usize, bool)> {
    let neg: Vec<i64> = k.iter().map(|v| -v).collect();
    modes.iter().enumerate().find_map(|(m, km)| {
        if km[..d] == k[..d] {
            Some((m, false))
        } else if km[..d] == neg[..d] {
            Some((m, true))
        } else {
            None
        }
    })
}

/// Borrowed view of one layer's parameters.
#[derive(Clone, Copy)]
pub struct LayerParams<'a> {
    pub config: &'a ModelConfig,
    pub layout: &'a LayerLayout,
    pub theta: &'a [f64],
}

impl<'a> LayerParams<'a> {
    fn get(&self, b: &ParamBlock) -> &'a [f64] {
        &self.theta[b.range()]
    }

    fn opt(&self, b: &Option<ParamBlock>) -> Result<&'a [f64]> {
        b.as_ref()
            .map(|b| self.get(b))
            .ok_or_else(|| Error::invalid("parameter block missing for this layer type"))
    }
}

/// Per-cloud quantities shared by all layers: summation order, gradient stencil
/// and the geometric features `[n_x; ∇_D n_x]`.
#[derive(Clone, Debug)]
pub struct GeomFeatures {
    pub dims: usize,
    pub n: usize,
    pub points: Vec<f64>,
    pub normals: Vec<f64>,
    pub weights: Vec<f64>,
    pub mask: Vec<bool>,
    /// Active points sorted by coordinates; sums over points follow this order,
    /// which makes every output independent of the point numbering.
    pub order: Vec<usize>,
    pub stencil: GradientStencil,
    /// `N × (d + d²)`: normal, then its tangential gradient (channel-major).
    pub normal_feats: Vec<f64>,
}

impl GeomFeatures {
    pub fn new(cloud: &PointCloud) -> Result<Self> {
        let d = cloud.dims;
        let missing = (0..cloud.len()).any(|i| cloud.mask[i] && cloud.neighbors[i].is_empty());
        let built;
        let cloud = if missing {
            built = build_neighbor_lists(cloud, default_k(d))?;
            &built
        } else {
            cloud
        };
        let stencil = GradientStencil::build(cloud)?;
        let grad_n = stencil.apply(&cloud.normals, d);
        let nf = d + d * d;
        let mut normal_feats = vec![0.0; cloud.len() * nf];
        for i in 0..cloud.len() {
            if !cloud.mask[i] {
                continue;
            }
            normal_feats[i * nf..i * nf + d].copy_from_slice(cloud.normal(i));
            normal_feats[i * nf + d..(i + 1) * nf].copy_from_slice(&grad_n[i * d * d..(i + 1) * d * d]);
        }
        let mut order: Vec<usize> = (0..cloud.len()).filter(|&i| cloud.mask[i]).collect();
        order.sort_by(|&a, &b| {
            lex_cmp(cloud.point(a), cloud.point(b))
                .then_with(|| lex_cmp(cloud.normal(a), cloud.normal(b)))
                .then_with(|| cloud.weights[a].total_cmp(&cloud.weights[b]))
        });
        Ok(GeomFeatures {
            dims: d,
            n: cloud.len(),
            points: cloud.points.clone(),
            normals: cloud.normals.clone(),
            weights: cloud.weights.clone(),
            mask: cloud.mask.clone(),
            order,
            stencil,
            normal_feats,
        })
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dims..(i + 1) * self.dims]
    }

    pub fn normal(&self, i: usize) -> &[f64] {
        &self.normals[i * self.dims..(i + 1) * self.dims]
    }
}

/// `ã = [a; x; n_x]` per point, `N × (d_a + 2d)`; padded rows are zero.
pub fn build_features(geom: &GeomFeatures, a: &[f64], d_a: usize) -> Result<Vec<f64>> {
    if a.len() != geom.n * d_a {
        return Err(Error::invalid(format!("input has {} values, expected {} × {d_a}", a.len(), geom.n)));
    }
    let d = geom.dims;
    let width = d_a + 2 * d;
    let mut out = vec![0.0; geom.n * width];
    for i in 0..geom.n {
        if !geom.mask[i] {
            continue;
        }
        let row = &mut out[i * width..(i + 1) * width];
        row[..d_a].copy_from_slice(&a[i * d_a..(i + 1) * d_a]);
        row[d_a..d_a + d].copy_from_slice(geom.point(i));
        row[d_a + d..].copy_from_slice(geom.normal(i));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Pointwise helpers.

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

fn softsign_grad(x: f64) -> f64 {
    let s = 1.0 + x.abs();
    1.0 / (s * s)
}

/// `out_i = W x_i` for row-major `W` (`rows × cols`) on active rows.
fn rows_matmul(w: &[f64], rows: usize, cols: usize, x: &[f64], mask: &[bool]) -> Vec<f64> {
    let mut out = vec![0.0; mask.len() * rows];
    crate::par::for_each_row(&mut out, rows, |i, row| {
        if !mask[i] {
            return;
        }
        let xi = &x[i * cols..(i + 1) * cols];
        for (r, o) in row.iter_mut().enumerate() {
            *o = w[r * cols..(r + 1) * cols].iter().zip(xi).map(|(a, b)| a * b).sum();
        }
    });
    out
}

/// `out_i = Wᵀ y_i`.
fn rows_matmul_t(w: &[f64], rows: usize, cols: usize, y: &[f64], mask: &[bool]) -> Vec<f64> {
    let mut out = vec![0.0; mask.len() * cols];
    crate::par::for_each_row(&mut out, cols, |i, row| {
        if !mask[i] {
            return;
        }
        for r in 0..rows {
            let yr = y[i * rows + r];
            if yr != 0.0 {
                for (o, &wv) in row.iter_mut().zip(&w[r * cols..(r + 1) * cols]) {
                    *o += wv * yr;
                }
            }
        }
    });
    out
}

/// `dW += Σ_i y_i x_iᵀ`.
fn acc_outer(dw: &mut [f64], rows: usize, cols: usize, y: &[f64], x: &[f64]) {
    let n = y.len() / rows.max(1);
    crate::par::for_each_row(dw, cols, |r, row| {
        for i in 0..n {
            let yr = y[i * rows + r];
            if yr != 0.0 {
                for (o, &xv) in row.iter_mut().zip(&x[i * cols..(i + 1) * cols]) {
                    *o += yr * xv;
                }
            }
        }
    });
}

fn add_into(a: &mut [f64], b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

fn add_bias(x: &mut [f64], b: &[f64], mask: &[bool]) {
    let c = b.len();
    for (i, row) in x.chunks_mut(c).enumerate() {
        if mask[i] {
            add_into(row, b);
        }
    }
}

fn acc_bias(db: &mut [f64], y: &[f64]) {
    let c = db.len();
    for row in y.chunks(c) {
        add_into(db, row);
    }
}

/// `[f; f ⊗ n]` per point: channel `c`, then `w + c·d + a`.
fn with_normal_tensor(f: &[f64], geom: &GeomFeatures, w: usize) -> Vec<f64> {
    let d = geom.dims;
    let cw = w * (d + 1);
    let mut out = vec![0.0; geom.n * cw];
    for i in 0..geom.n {
        if !geom.mask[i] {
            continue;
        }
        let n = geom.normal(i);
        let row = &mut out[i * cw..(i + 1) * cw];
        for c in 0..w {
            let v = f[i * w + c];
            row[c] = v;
            for a in 0..d {
                row[w + c * d + a] = v * n[a];
            }
        }
    }
    out
}

/// Adjoint of [`with_normal_tensor`].
fn with_normal_tensor_t(dz: &[f64], geom: &GeomFeatures, w: usize) -> Vec<f64> {
    let d = geom.dims;
    let cw = w * (d + 1);
    let mut out = vec![0.0; geom.n * w];
    for i in 0..geom.n {
        if !geom.mask[i] {
            continue;
        }
        let n = geom.normal(i);
        let row = &dz[i * cw..(i + 1) * cw];
        for c in 0..w {
            let mut s = row[c];
            for a in 0..d {
                s += row[w + c * d + a] * n[a];
            }
            out[i * w + c] = s;
        }
    }
    out
}

fn mask_rows(x: &mut [f64], c: usize, mask: &[bool]) {
    for (i, row) in x.chunks_mut(c).enumerate() {
        if !mask[i] {
            row.fill(0.0);
        }
    }
}

// ---------------------------------------------------------------------------
// Spectral pieces on the half mode set.

struct Spectral {
    p: usize,
    dims: usize,
    modes: Vec<[i64; 3]>,
    box_half: Vec<f64>,
}

impl Spectral {
    fn new(cfg: &ModelConfig) -> Self {
        Spectral { p: cfg.p, dims: cfg.dims, modes: half_modes(cfg.p, cfg.dims), box_half: cfg.box_half.clone() }
    }

    fn h(&self) -> usize {
        self.modes.len()
    }

    /// `e_k(x) = e^(iπ k·x/l)` for every stored mode.
    fn phases_at(&self, x: &[f64], out: &mut [Complex64]) {
        let per: Vec<Vec<Complex64>> =
            (0..self.dims).map(|a| crate::ewald::phases(self.p, x[a], self.box_half[a], 1.0)).collect();
        let p = self.p as i64;
        for (o, k) in out.iter_mut().zip(&self.modes) {
            let mut z = per[0][(k[0] + p) as usize];
            for a in 1..self.dims {
                z *= per[a][(k[a] + p) as usize];
            }
            *o = z;
        }
    }

    /// `S_m = Σ_j conj(e_m(y_j)) v_j (w_j)` over active points in canonical order.
    fn moments(&self, geom: &GeomFeatures, v: &[f64], c: usize, weighted: bool) -> Vec<Complex64> {
        let h = self.h();
        let chunks: Vec<&[usize]> = geom.order.chunks(CHUNK).collect();
        let parts = crate::par::map_slice(&chunks, |idx| {
            let mut acc = vec![ZERO; h * c];
            let mut ph = vec![ZERO; h];
            for &j in idx.iter() {
                let wj = if weighted { geom.weights[j] } else { 1.0 };
                let vj = &v[j * c..(j + 1) * c];
                if wj == 0.0 || vj.iter().all(|&x| x == 0.0) {
                    continue;
                }
                self.phases_at(geom.point(j), &mut ph);
                for (m, z) in ph.iter().enumerate() {
                    let z = z.conj() * wj;
                    for (a, &x) in acc[m * c..(m + 1) * c].iter_mut().zip(vj) {
                        *a += z * x;
                    }
                }
            }
            acc
        });
        let mut total = vec![ZERO; h * c];
        for part in parts {
            for (t, v) in total.iter_mut().zip(part) {
                *t += v;
            }
        }
        total
    }

    /// `out_i = Re Σ_m c_m e_m(x_i) t_m` with `c_0 = 1` and `c_m = 2` when `doubled`.
    fn synth(&self, geom: &GeomFeatures, t: &[Complex64], c: usize, doubled: bool) -> Vec<f64> {
        let h = self.h();
        let mut out = vec![0.0; geom.n * c];
        crate::par::for_each_row(&mut out, c, |i, row| {
            if !geom.mask[i] {
                return;
            }
            let mut ph = vec![ZERO; h];
            self.phases_at(geom.point(i), &mut ph);
            for (m, z) in ph.iter().enumerate() {
                let z = if doubled && m > 0 { z * 2.0 } else { *z };
                for (o, tv) in row.iter_mut().zip(&t[m * c..(m + 1) * c]) {
                    *o += z.re * tv.re - z.im * tv.im;
                }
            }
        });
        out
    }
}

/// `T_m = W_m S_m` for a Fourier block of `rows × cols` per mode.
fn apply_modes(fw: &[f64], rows: usize, cols: usize, s: &[Complex64], h: usize) -> Vec<Complex64> {
    let rc = rows * cols;
    let mut t = vec![ZERO; h * rows];
    for m in 0..h {
        let off = fourier_offset(rows, cols, m);
        let sm = &s[m * cols..(m + 1) * cols];
        for o in 0..rows {
            let mut acc = ZERO;
            for c in 0..cols {
                let e = o * cols + c;
                let im = if m > 0 { fw[off + rc + e] } else { 0.0 };
                acc += Complex64::new(fw[off + e], im) * sm[c];
            }
            t[m * rows + o] = acc;
        }
    }
    t
}

/// Reverse of [`apply_modes`]: accumulates `dW_m = dT_m S_mᴴ` and returns `dS_m = W_mᴴ dT_m`.
fn apply_modes_backward(
    fw: &[f64],
    dfw: &mut [f64],
    rows: usize,
    cols: usize,
    s: &[Complex64],
    dt: &[Complex64],
    h: usize,
) -> Vec<Complex64> {
    let rc = rows * cols;
    let mut ds = vec![ZERO; h * cols];
    for m in 0..h {
        let off = fourier_offset(rows, cols, m);
        for o in 0..rows {
            let g = dt[m * rows + o];
            for c in 0..cols {
                let e = o * cols + c;
                let prod = g * s[m * cols + c].conj();
                dfw[off + e] += prod.re;
                let im = if m > 0 {
                    dfw[off + rc + e] += prod.im;
                    fw[off + rc + e]
                } else {
                    0.0
                };
                ds[m * cols + c] += Complex64::new(fw[off + e], -im) * g;
            }
        }
    }
    ds
}

// ---------------------------------------------------------------------------
// Layer pieces.

fn check_f(lp: &LayerParams, geom: &GeomFeatures, f: &[f64]) -> Result<()> {
    let cfg = lp.config;
    if geom.dims != cfg.dims {
        return Err(Error::invalid("cloud dimension does not match the model"));
    }
    if f.len() != geom.n * cfg.width {
        return Err(Error::invalid(format!("layer input has {} values, expected {} × {}", f.len(), geom.n, cfg.width)));
    }
    Ok(())
}

struct LongParts {
    s: Vec<Complex64>,
    g: Vec<f64>,
    out: Vec<f64>,
}

fn long_forward(lp: &LayerParams, sp: &Spectral, geom: &GeomFeatures, f: &[f64]) -> Result<LongParts> {
    let cfg = lp.config;
    let (w, d, h) = (cfg.width, cfg.dims, sp.h());
    let fw = lp.get(&lp.layout.fourier);
    if cfg.is_linear() {
        let s = sp.moments(geom, f, w, true);
        let mut t = apply_modes(fw, w, w, &s, h);
        if let Some(b2) = &lp.layout.v2 {
            let s2 = sp.moments(geom, &normal_tensor_only(f, geom, w), w * d, true);
            for (a, b) in t.iter_mut().zip(apply_modes(lp.get(b2), w, w * d, &s2, h)) {
                *a += b;
            }
        }
        let g = sp.synth(geom, &t, w, true);
        let mut out = g.clone();
        if let Some(b3) = &lp.layout.v3 {
            let t3 = apply_modes(lp.get(b3), w * d, w, &s, h);
            let g3 = sp.synth(geom, &t3, w * d, true);
            for i in 0..geom.n {
                let n = geom.normal(i);
                for o in 0..w {
                    out[i * w + o] += (0..d).map(|a| n[a] * g3[i * w * d + o * d + a]).sum::<f64>();
                }
            }
        }
        return Ok(LongParts { s, g, out });
    }
    if !cfg.boundary() {
        let s = sp.moments(geom, f, w, true);
        let g = sp.synth(geom, &apply_modes(fw, w, w, &s, h), w, true);
        return Ok(LongParts { s, out: g.clone(), g });
    }
    let cw = w * (d + 1);
    let z = rows_matmul(lp.opt(&lp.layout.w1)?, w, cw, &with_normal_tensor(f, geom, w), &geom.mask);
    let s = sp.moments(geom, &z, w, true);
    let g = sp.synth(geom, &apply_modes(fw, w, w, &s, h), w, true);
    let mut out = rows_matmul(lp.opt(&lp.layout.w3)?, w, w, &g, &geom.mask);
    add_into(&mut out, &rows_matmul(lp.opt(&lp.layout.w2)?, w, cw, &with_normal_tensor(&g, geom, w), &geom.mask));
    Ok(LongParts { s, g, out })
}

/// `f ⊗ n` alone, `N × w d`.
fn normal_tensor_only(f: &[f64], geom: &GeomFeatures, w: usize) -> Vec<f64> {
    let d = geom.dims;
    let mut out = vec![0.0; geom.n * w * d];
    for i in 0..geom.n {
        if !geom.mask[i] {
            continue;
        }
        let n = geom.normal(i);
        for c in 0..w {
            for a in 0..d {
                out[i * w * d + c * d + a] = f[i * w + c] * n[a];
            }
        }
    }
    out
}

struct ShortParts {
    grad: Vec<f64>,
    qpre: Vec<f64>,
    r: Vec<f64>,
    out: Vec<f64>,
}

fn short_forward(lp: &LayerParams, geom: &GeomFeatures, f: &[f64]) -> Result<ShortParts> {
    let cfg = lp.config;
    let (w, d) = (cfg.width, cfg.dims);
    let nf = cfg.n_normal_feats();
    let mask = &geom.mask;
    let grad = geom.stencil.apply(f, w);
    let sg: Vec<f64> = if cfg.is_linear() { grad.clone() } else { grad.iter().map(|&x| softsign_scalar(x)).collect() };
    let mut out = rows_matmul(lp.get(&lp.layout.wl), w, w, f, mask);
    add_bias(&mut out, lp.get(&lp.layout.b), mask);
    add_into(&mut out, &rows_matmul(lp.get(&lp.layout.wg1), w, w * d, &sg, mask));
    let (mut qpre, mut r) = (Vec::new(), Vec::new());
    if cfg.boundary() {
        let wg2 = lp.opt(&lp.layout.wg2)?;
        if cfg.is_linear() {
            let prod = linear_normal_products(f, geom, w);
            add_into(&mut out, &rows_matmul(wg2, w, w * nf, &prod, mask));
        } else {
            qpre = rows_matmul(lp.opt(&lp.layout.wg3)?, w, nf, &geom.normal_feats, mask);
            r = rows_matmul(lp.opt(&lp.layout.wg4)?, w, w, f, mask);
            let m: Vec<f64> = qpre.iter().zip(&r).map(|(&q, &rv)| softsign_scalar(q) * rv).collect();
            add_into(&mut out, &rows_matmul(wg2, w, w, &m, mask));
        }
    }
    Ok(ShortParts { grad, qpre, r, out })
}

/// Linear model normal term input: `SoftSign([n; ∇_D n])_m · f_c` at index `m·w + c`.
fn linear_normal_products(f: &[f64], geom: &GeomFeatures, w: usize) -> Vec<f64> {
    let nf = geom.dims + geom.dims * geom.dims;
    let mut out = vec![0.0; geom.n * w * nf];
    for i in 0..geom.n {
        if !geom.mask[i] {
            continue;
        }
        for m in 0..nf {
            let s = softsign_scalar(geom.normal_feats[i * nf + m]);
            for c in 0..w {
                out[i * w * nf + m * w + c] = s * f[i * w + c];
            }
        }
    }
    out
}

/// Long-range operator `K_long f` of one layer.
pub fn k_long_apply(lp: &LayerParams, geom: &GeomFeatures, f: &[f64]) -> Result<Vec<f64>> {
    check_f(lp, geom, f)?;
    Ok(long_forward(lp, &Spectral::new(lp.config), geom, f)?.out)
}

/// Short-range operator `K_short f` of one layer.
pub fn k_short_apply(lp: &LayerParams, geom: &GeomFeatures, f: &[f64]) -> Result<Vec<f64>> {
    check_f(lp, geom, f)?;
    Ok(short_forward(lp, geom, f)?.out)
}

/// Recorded intermediates of one layer.
#[derive(Clone, Debug)]
struct LayerTape {
    input: Vec<f64>,
    s: Vec<Complex64>,
    g: Vec<f64>,
    pre: Vec<f64>,
    grad: Vec<f64>,
    qpre: Vec<f64>,
    r: Vec<f64>,
}

fn layer_forward_inner(lp: &LayerParams, sp: &Spectral, geom: &GeomFeatures, f: &[f64]) -> Result<(Vec<f64>, LayerTape)> {
    check_f(lp, geom, f)?;
    let w = lp.config.width;
    let long = long_forward(lp, sp, geom, f)?;
    let short = short_forward(lp, geom, f)?;
    let mut pre = long.out;
    add_into(&mut pre, &short.out);
    mask_rows(&mut pre, w, &geom.mask);
    let out: Vec<f64> = if lp.config.is_linear() {
        f.iter().zip(&pre).map(|(a, b)| a + b).collect()
    } else {
        f.iter().zip(&pre).map(|(a, &b)| a + gelu(b)).collect()
    };
    let tape = LayerTape { input: f.to_vec(), s: long.s, g: long.g, pre, grad: short.grad, qpre: short.qpre, r: short.r };
    Ok((out, tape))
}

/// `f + σ(K_long f + K_short f)`; the linear architecture drops `σ`.
pub fn layer_forward(lp: &LayerParams, geom: &GeomFeatures, f: &[f64]) -> Result<Vec<f64>> {
    Ok(layer_forward_inner(lp, &Spectral::new(lp.config), geom, f)?.0)
}

/// Reverse pass of one deep layer; accumulates into `grad` and returns `∂L/∂f`.
fn layer_backward(
    lp: &LayerParams,
    sp: &Spectral,
    geom: &GeomFeatures,
    tape: &LayerTape,
    dout: &[f64],
    grad: &mut [f64],
) -> Result<Vec<f64>> {
    let cfg = lp.config;
    let lay = lp.layout;
    let (w, d, h) = (cfg.width, cfg.dims, sp.h());
    let nf = cfg.n_normal_feats();
    let mask = &geom.mask;
    let f = &tape.input;
    let mut dpre: Vec<f64> = dout.iter().zip(&tape.pre).map(|(&g, &x)| g * gelu_grad(x)).collect();
    mask_rows(&mut dpre, w, mask);
    let mut df = dout.to_vec();

    // Short range.
    acc_outer(&mut grad[lay.wl.range()], w, w, &dpre, f);
    add_into(&mut df, &rows_matmul_t(lp.get(&lay.wl), w, w, &dpre, mask));
    acc_bias(&mut grad[lay.b.range()], &dpre);
    let sg: Vec<f64> = tape.grad.iter().map(|&x| softsign_scalar(x)).collect();
    acc_outer(&mut grad[lay.wg1.range()], w, w * d, &dpre, &sg);
    let dsg = rows_matmul_t(lp.get(&lay.wg1), w, w * d, &dpre, mask);
    let dgrad: Vec<f64> = dsg.iter().zip(&tape.grad).map(|(&g, &x)| g * softsign_grad(x)).collect();
    add_into(&mut df, &geom.stencil.apply_transpose(&dgrad, w));
    if cfg.boundary() {
        let (bg2, bg3, bg4) = (lay.wg2.as_ref(), lay.wg3.as_ref(), lay.wg4.as_ref());
        let (Some(bg2), Some(bg3), Some(bg4)) = (bg2, bg3, bg4) else {
            return Err(Error::invalid("boundary layer without normal feature weights"));
        };
        let q: Vec<f64> = tape.qpre.iter().map(|&x| softsign_scalar(x)).collect();
        let m: Vec<f64> = q.iter().zip(&tape.r).map(|(a, b)| a * b).collect();
        acc_outer(&mut grad[bg2.range()], w, w, &dpre, &m);
        let dm = rows_matmul_t(lp.get(bg2), w, w, &dpre, mask);
        let dr: Vec<f64> = dm.iter().zip(&q).map(|(a, b)| a * b).collect();
        let dqpre: Vec<f64> =
            dm.iter().zip(&tape.r).zip(&tape.qpre).map(|((a, b), &x)| a * b * softsign_grad(x)).collect();
        acc_outer(&mut grad[bg4.range()], w, w, &dr, f);
        add_into(&mut df, &rows_matmul_t(lp.get(bg4), w, w, &dr, mask));
        acc_outer(&mut grad[bg3.range()], w, nf, &dqpre, &geom.normal_feats);
    }

    // Long range.
    let dg = if cfg.boundary() {
        let (Some(b2), Some(b3)) = (lay.w2.as_ref(), lay.w3.as_ref()) else {
            return Err(Error::invalid("boundary layer without factorization weights"));
        };
        let cw = w * (d + 1);
        acc_outer(&mut grad[b3.range()], w, w, &dpre, &tape.g);
        acc_outer(&mut grad[b2.range()], w, cw, &dpre, &with_normal_tensor(&tape.g, geom, w));
        let mut dg = rows_matmul_t(lp.get(b3), w, w, &dpre, mask);
        add_into(&mut dg, &with_normal_tensor_t(&rows_matmul_t(lp.get(b2), w, cw, &dpre, mask), geom, w));
        dg
    } else {
        dpre.clone()
    };
    let mut dt = sp.moments(geom, &dg, w, false);
    for v in dt.iter_mut().skip(w) {
        *v *= 2.0;
    }
    let fb = &lay.fourier;
    let ds = apply_modes_backward(lp.get(fb), &mut grad[fb.range()], w, w, &tape.s, &dt, h);
    let mut dz = sp.synth(geom, &ds, w, false);
    for (i, row) in dz.chunks_mut(w).enumerate() {
        for v in row {
            *v *= geom.weights[i];
        }
    }
    if cfg.boundary() {
        let b1 = lay.w1.as_ref().ok_or_else(|| Error::invalid("missing w1"))?;
        let cw = w * (d + 1);
        let zin = with_normal_tensor(f, geom, w);
        acc_outer(&mut grad[b1.range()], w, cw, &dz, &zin);
        add_into(&mut df, &with_normal_tensor_t(&rows_matmul_t(lp.get(b1), w, cw, &dz, mask), geom, w));
    } else {
        add_into(&mut df, &dz);
    }
    Ok(df)
}

/// Activations recorded by [`model_forward`].
#[derive(Clone, Debug)]
pub struct Tape {
    n: usize,
    n_params: usize,
    feats: Vec<f64>,
    lift_pre: Vec<f64>,
    layers: Vec<LayerTape>,
    proj_in: Vec<f64>,
    proj_pre: Vec<f64>,
    /// Model output `N × d_u`.
    pub output: Vec<f64>,
}

/// Lift, apply the layers and project; returns `u` (`N × d_u`) and the tape.
pub fn model_forward(mp: &ModelParams, geom: &GeomFeatures, a: &[f64]) -> Result<(Vec<f64>, Tape)> {
    let cfg = &mp.config;
    if geom.dims != cfg.dims {
        return Err(Error::invalid("cloud dimension does not match the model"));
    }
    if a.len() != geom.n * cfg.d_a {
        return Err(Error::invalid(format!("input has {} values, expected {} × {}", a.len(), geom.n, cfg.d_a)));
    }
    let w = cfg.width;
    let mask = &geom.mask;
    let sp = Spectral::new(cfg);
    let (feats, lift_pre, mut h) = if let Some([lw, lb]) = &mp.layout.lift {
        let feats = build_features(geom, a, cfg.d_a)?;
        let mut pre = rows_matmul(mp.block(lw), w, lw.cols, &feats, mask);
        add_bias(&mut pre, mp.block(lb), mask);
        let mut h: Vec<f64> = pre.iter().map(|&x| gelu(x)).collect();
        mask_rows(&mut h, w, mask);
        (feats, pre, h)
    } else {
        (Vec::new(), Vec::new(), pad_channels(a, cfg.d_a, w, mask))
    };
    let mut layers = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let (out, t) = layer_forward_inner(&mp.layer(l), &sp, geom, &h)?;
        layers.push(t);
        h = out;
    }
    let (proj_pre, u) = if let Some([pw, pb, pw2, pb2]) = &mp.layout.proj {
        let hp = cfg.proj_hidden;
        let mut pre = rows_matmul(mp.block(pw), hp, w, &h, mask);
        add_bias(&mut pre, mp.block(pb), mask);
        let mut hid: Vec<f64> = pre.iter().map(|&x| gelu(x)).collect();
        mask_rows(&mut hid, hp, mask);
        let mut u = rows_matmul(mp.block(pw2), cfg.d_u, hp, &hid, mask);
        add_bias(&mut u, mp.block(pb2), mask);
        (pre, u)
    } else {
        (Vec::new(), select_channels(&h, w, cfg.d_u))
    };
    if u.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical("model output is not finite"));
    }
    let tape =
        Tape { n: geom.n, n_params: mp.n_params(), feats, lift_pre, layers, proj_in: h, proj_pre, output: u.clone() };
    Ok((u, tape))
}

fn pad_channels(a: &[f64], c_in: usize, c_out: usize, mask: &[bool]) -> Vec<f64> {
    let mut out = vec![0.0; mask.len() * c_out];
    for i in 0..mask.len() {
        if mask[i] {
            out[i * c_out..i * c_out + c_in].copy_from_slice(&a[i * c_in..(i + 1) * c_in]);
        }
    }
    out
}

fn select_channels(h: &[f64], w: usize, c: usize) -> Vec<f64> {
    h.chunks(w).flat_map(|row| row[..c].iter().copied()).collect()
}

/// Exact reverse-mode gradient of `Σ grad_u · u` with respect to every parameter,
/// in the layout of `mp.theta`.
pub fn model_backward(mp: &ModelParams, geom: &GeomFeatures, tape: &Tape, grad_u: &[f64]) -> Result<Vec<f64>> {
    let cfg = &mp.config;
    if tape.n != geom.n || tape.n_params != mp.n_params() || tape.layers.len() != cfg.layers {
        return Err(Error::invalid("tape does not match this model and cloud"));
    }
    if grad_u.len() != geom.n * cfg.d_u {
        return Err(Error::invalid("output gradient has wrong shape"));
    }
    let mut grad = vec![0.0; mp.n_params()];
    if cfg.is_linear() {
        let feats = linear_features(mp, geom, &tape.layers[0].input)?;
        for q in 0..feats.q {
            for o in 0..cfg.d_u {
                let mut s = 0.0;
                for i in 0..geom.n {
                    s += feats.phi[i * feats.q + q] * grad_u[i * cfg.d_u + o];
                }
                grad[feats.base[q] + o * feats.stride[q]] += s;
            }
        }
        return Ok(grad);
    }
    let (w, hp) = (cfg.width, cfg.proj_hidden);
    let mask = &geom.mask;
    let sp = Spectral::new(cfg);
    let [pw, pb, pw2, pb2] = mp.layout.proj.as_ref().ok_or_else(|| Error::invalid("missing projection"))?;
    let mut du = grad_u.to_vec();
    mask_rows(&mut du, cfg.d_u, mask);
    let hid: Vec<f64> = tape.proj_pre.iter().map(|&x| gelu(x)).collect();
    acc_bias(&mut grad[pb2.range()], &du);
    acc_outer(&mut grad[pw2.range()], cfg.d_u, hp, &du, &hid);
    let dhid = rows_matmul_t(mp.block(pw2), cfg.d_u, hp, &du, mask);
    let dpp: Vec<f64> = dhid.iter().zip(&tape.proj_pre).map(|(&g, &x)| g * gelu_grad(x)).collect();
    acc_bias(&mut grad[pb.range()], &dpp);
    acc_outer(&mut grad[pw.range()], hp, w, &dpp, &tape.proj_in);
    let mut dh = rows_matmul_t(mp.block(pw), hp, w, &dpp, mask);
    for l in (0..cfg.layers).rev() {
        dh = layer_backward(&mp.layer(l), &sp, geom, &tape.layers[l], &dh, &mut grad)?;
    }
    let [lw, lb] = mp.layout.lift.as_ref().ok_or_else(|| Error::invalid("missing lifting"))?;
    let mut dl: Vec<f64> = dh.iter().zip(&tape.lift_pre).map(|(&g, &x)| g * gelu_grad(x)).collect();
    mask_rows(&mut dl, w, mask);
    acc_bias(&mut grad[lb.range()], &dl);
    acc_outer(&mut grad[lw.range()], w, lw.cols, &dl, &tape.feats);
    Ok(grad)
}

/// Regression features of the linear model: `u_io = h_io + Σ_q φ_iq θ[base_q + o·stride_q]`.
#[derive(Clone, Debug)]
pub struct LinearFeatures {
    pub n: usize,
    pub q: usize,
    /// `N × Q`, zero on padded rows.
    pub phi: Vec<f64>,
    pub base: Vec<usize>,
    pub stride: Vec<usize>,
    /// Identity (residual) part, `N × d_u`.
    pub offset: Vec<f64>,
}

/// Build the regression features of a linear model for input `a` (`N × d_a`, or
/// the already padded `N × d_f` layer input).
pub fn linear_features(mp: &ModelParams, geom: &GeomFeatures, a: &[f64]) -> Result<LinearFeatures> {
    let cfg = &mp.config;
    if !cfg.is_linear() {
        return Err(Error::invalid("linear_features needs the linear architecture"));
    }
    let (w, d) = (cfg.width, cfg.dims);
    let hin = if a.len() == geom.n * w {
        a.to_vec()
    } else if a.len() == geom.n * cfg.d_a {
        pad_channels(a, cfg.d_a, w, &geom.mask)
    } else {
        return Err(Error::invalid("input has wrong shape"));
    };
    let sp = Spectral::new(cfg);
    let hm = sp.h();
    let lay = &mp.layout.layers[0];
    let nf = cfg.n_normal_feats();

    // Column map.
    let mut base = Vec::new();
    let mut stride = Vec::new();
    let fourier_cols = |b: &ParamBlock, in_c: usize, row_part: usize, base: &mut Vec<usize>, stride: &mut Vec<usize>| {
        let rc = b.rows * b.cols;
        for m in 0..hm {
            let off = b.offset + fourier_offset(b.rows, b.cols, m);
            let parts = if m == 0 { 1 } else { 2 };
            for part in 0..parts {
                for c in 0..in_c {
                    base.push(off + part * rc + row_part * b.cols + c);
                    stride.push(b.cols * (b.rows / cfg.width));
                }
            }
        }
    };
    fourier_cols(&lay.fourier, w, 0, &mut base, &mut stride);
    if let Some(b2) = &lay.v2 {
        fourier_cols(b2, w * d, 0, &mut base, &mut stride);
    }
    if let Some(b3) = &lay.v3 {
        for a_ in 0..d {
            fourier_cols(b3, w, a_, &mut base, &mut stride);
        }
    }
    let short_start = base.len();
    for c in 0..w {
        base.push(lay.wl.offset + c);
        stride.push(w);
    }
    base.push(lay.b.offset);
    stride.push(1);
    for e in 0..w * d {
        base.push(lay.wg1.offset + e);
        stride.push(w * d);
    }
    if let Some(bg2) = &lay.wg2 {
        for e in 0..w * nf {
            base.push(bg2.offset + e);
            stride.push(w * nf);
        }
    }
    let q = base.len();

    let s1 = sp.moments(geom, &hin, w, true);
    let s2 = if lay.v2.is_some() { sp.moments(geom, &normal_tensor_only(&hin, geom, w), w * d, true) } else { Vec::new() };
    let grad = geom.stencil.apply(&hin, w);
    let mut phi = vec![0.0; geom.n * q];
    crate::par::for_each_row(&mut phi, q, |i, row| {
        if !geom.mask[i] {
            return;
        }
        let mut ph = vec![ZERO; hm];
        sp.phases_at(geom.point(i), &mut ph);
        let mut col = 0;
        let push_modes = |row: &mut [f64], s: &[Complex64], in_c: usize, scale: f64, col: &mut usize| {
            for m in 0..hm {
                if m == 0 {
                    for c in 0..in_c {
                        row[*col] = scale * s[c].re;
                        *col += 1;
                    }
                } else {
                    for part in 0..2 {
                        for c in 0..in_c {
                            let z = ph[m] * s[m * in_c + c];
                            row[*col] = if part == 0 { 2.0 * scale * z.re } else { -2.0 * scale * z.im };
                            *col += 1;
                        }
                    }
                }
            }
        };
        push_modes(row, &s1, w, 1.0, &mut col);
        if lay.v2.is_some() {
            push_modes(row, &s2, w * d, 1.0, &mut col);
        }
        if lay.v3.is_some() {
            let n = &geom.normals[i * d..(i + 1) * d];
            for &na in n {
                push_modes(row, &s1, w, na, &mut col);
            }
        }
        debug_assert_eq!(col, short_start);
        let hi = &hin[i * w..(i + 1) * w];
        row[col..col + w].copy_from_slice(hi);
        col += w;
        row[col] = 1.0;
        col += 1;
        row[col..col + w * d].copy_from_slice(&grad[i * w * d..(i + 1) * w * d]);
        col += w * d;
        if lay.wg2.is_some() {
            for m in 0..nf {
                let s = softsign_scalar(geom.normal_feats[i * nf + m]);
                for c in 0..w {
                    row[col] = s * hi[c];
                    col += 1;
                }
            }
        }
    });
    let offset = select_channels(&hin, w, cfg.d_u);
    Ok(LinearFeatures { n: geom.n, q, phi, base, stride, offset })
}
