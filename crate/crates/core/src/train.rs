//! Losses, least-squares fitting of the linear model, Adam/OneCycle training,
//! evaluation and the scaling-law experiment driver.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{generate_curve_dataset, CurveDatasetConfig, Sample, SampleSet};
use crate::geometry::{CurveFamily, GrfSpec};
use crate::kernels::KernelKind;
use crate::operator::{linear_features, model_backward, model_forward, Architecture, GeomFeatures, ModelConfig, ModelParams};
use crate::{Error, Result};

/// Relative L2 error `‖pred − ref‖_w / ‖ref‖_w` over `N × c` arrays and its gradient
/// with respect to `pred`. Points with zero weight do not contribute.
pub fn relative_l2_loss(pred: &[f64], reference: &[f64], weights: &[f64], c: usize) -> Result<(f64, Vec<f64>)> {
    if pred.len() != reference.len() || pred.len() != weights.len() * c {
        return Err(Error::invalid("relative_l2_loss: shape mismatch"));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        for k in i * c..(i + 1) * c {
            let e = pred[k] - reference[k];
            num += w * e * e;
            den += w * reference[k] * reference[k];
        }
    }
    if den <= 0.0 {
        return Err(Error::invalid("relative_l2_loss: reference has zero norm"));
    }
    let (num, den) = (num.sqrt(), den.sqrt());
    let loss = num / den;
    let mut grad = vec![0.0; pred.len()];
    if num > 0.0 {
        let s = 1.0 / (num * den);
        for (i, &w) in weights.iter().enumerate() {
            for k in i * c..(i + 1) * c {
                grad[k] = s * w * (pred[k] - reference[k]);
            }
        }
    }
    Ok((loss, grad))
}

/// Quadrature weights with padded points zeroed.
fn active_weights(sample: &Sample) -> Vec<f64> {
    let c = &sample.cloud;
    c.weights.iter().zip(&c.mask).map(|(&w, &m)| if m { w } else { 0.0 }).collect()
}

fn check_dims(cfg: &ModelConfig, ds: &SampleSet) -> Result<()> {
    if cfg.dims != ds.dims || cfg.d_a != ds.d_a || cfg.d_u != ds.d_u {
        return Err(Error::invalid(format!(
            "model (d={}, d_a={}, d_u={}) does not match dataset (d={}, d_a={}, d_u={})",
            cfg.dims, cfg.d_a, cfg.d_u, ds.dims, ds.d_a, ds.d_u
        )));
    }
    Ok(())
}

/// Per-sample geometric features, built once and reused across epochs.
pub fn geometry_features(ds: &SampleSet) -> Result<Vec<GeomFeatures>> {
    crate::par::try_map_range(ds.len(), |k| GeomFeatures::new(&ds.samples[k].cloud))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mean_rel_l2: f64,
    pub per_sample: Vec<f64>,
}

/// Mean relative L2 error of `mp` over `ds`.
pub fn evaluate(mp: &ModelParams, ds: &SampleSet) -> Result<EvalReport> {
    let geoms = geometry_features(ds)?;
    evaluate_with(mp, ds, &geoms)
}

pub fn evaluate_with(mp: &ModelParams, ds: &SampleSet, geoms: &[GeomFeatures]) -> Result<EvalReport> {
    check_dims(&mp.config, ds)?;
    if ds.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty dataset"));
    }
    let per_sample = crate::par::try_map_range(ds.len(), |k| {
        let s = &ds.samples[k];
        let (u, _) = model_forward(mp, &geoms[k], &s.a)?;
        Ok::<_, Error>(relative_l2_loss(&u, &s.u, &active_weights(s), ds.d_u)?.0)
    })?;
    let mean_rel_l2 = per_sample.iter().sum::<f64>() / per_sample.len() as f64;
    Ok(EvalReport { mean_rel_l2, per_sample })
}

// ---------------------------------------------------------------------------
// Linear model by least squares.

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearFitReport {
    /// Regression features per output channel.
    pub n_features: usize,
    /// Ridge weight actually added to the Gram diagonal, `λ · tr(G) / Q`.
    pub ridge: f64,
    /// Regularized objective at the solution.
    pub objective: f64,
}

/// Partition of `n` items into at most `parts` contiguous ranges.
fn partition(n: usize, parts: usize) -> Vec<(usize, usize)> {
    let parts = parts.clamp(1, n.max(1));
    (0..parts).map(|k| (k * n / parts, (k + 1) * n / parts)).filter(|(a, b)| b > a).collect()
}

const GRAM_PARTS: usize = 8;

/// Gram matrix `Σ w φ φᵀ` and right-hand sides `Σ w φ (u − h)` over the set.
fn normal_equations(mp: &ModelParams, ds: &SampleSet) -> Result<(DMatrix<f64>, DMatrix<f64>, usize)> {
    let d_u = ds.d_u;
    let ranges = partition(ds.len(), GRAM_PARTS);
    let parts = crate::par::map_slice(&ranges, |&(s, e)| -> Result<(DMatrix<f64>, DMatrix<f64>, usize)> {
        let mut g: Option<DMatrix<f64>> = None;
        let mut r: Option<DMatrix<f64>> = None;
        let mut q = 0;
        for sample in &ds.samples[s..e] {
            let geom = GeomFeatures::new(&sample.cloud)?;
            let f = linear_features(mp, &geom, &sample.a)?;
            q = f.q;
            let w = active_weights(sample);
            let mut phi = DMatrix::from_vec(f.q, f.n, f.phi);
            let mut y = DMatrix::<f64>::zeros(f.n, d_u);
            for i in 0..f.n {
                let sw = w[i].sqrt();
                phi.column_mut(i).scale_mut(sw);
                for o in 0..d_u {
                    y[(i, o)] = sw * (sample.u[i * d_u + o] - f.offset[i * d_u + o]);
                }
            }
            let gi = &phi * phi.transpose();
            let ri = &phi * y;
            match (&mut g, &mut r) {
                (Some(g), Some(r)) => {
                    *g += gi;
                    *r += ri;
                }
                _ => {
                    g = Some(gi);
                    r = Some(ri);
                }
            }
        }
        Ok((g.unwrap_or_else(|| DMatrix::zeros(0, 0)), r.unwrap_or_else(|| DMatrix::zeros(0, d_u)), q))
    });
    let mut total: Option<(DMatrix<f64>, DMatrix<f64>, usize)> = None;
    for part in parts {
        let (g, r, q) = part?;
        total = Some(match total {
            None => (g, r, q),
            Some((tg, tr, _)) => (tg + g, tr + r, q),
        });
    }
    total.ok_or_else(|| Error::invalid("cannot fit on an empty dataset"))
}

/// Fit the linear model by solving the ridge-regularized normal equations of the
/// quadrature-weighted squared misfit `Σ_samples Σ_i w_i ‖u_pred − u‖²`.
///
/// The ridge term is `λ · tr(G)/Q · ‖θ‖²`, so `λ` is relative to the data scale.
pub fn fit_linear_model(ds: &SampleSet, config: ModelConfig, lambda: f64) -> Result<(ModelParams, LinearFitReport)> {
    if config.arch != Architecture::Linear {
        return Err(Error::invalid("fit_linear_model needs the linear architecture"));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::invalid("lambda must be finite and non-negative"));
    }
    check_dims(&config, ds)?;
    let mut mp = ModelParams::zeros(config)?;
    let (g, r, q) = normal_equations(&mp, ds)?;
    let ridge = lambda * g.trace() / q as f64;
    let mut a = g.clone();
    for k in 0..q {
        a[(k, k)] += ridge;
    }
    let chol = a
        .cholesky()
        .ok_or_else(|| Error::numerical("normal equations are singular beyond the regularization"))?;
    let sol = chol.solve(&r);
    if sol.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical("least-squares solution is not finite"));
    }
    // Scatter the per-output solutions into the parameter layout.
    let geom = GeomFeatures::new(&ds.samples[0].cloud)?;
    let map = linear_features(&mp, &geom, &ds.samples[0].a)?;
    for k in 0..q {
        for o in 0..ds.d_u {
            mp.theta[map.base[k] + o * map.stride[k]] = sol[(k, o)];
        }
    }
    let objective = linear_objective(&mp, ds, ridge)?;
    Ok((mp, LinearFitReport { n_features: q, ridge, objective }))
}

/// `Σ_samples Σ_i w_i ‖u_pred − u‖² + ridge · ‖θ‖²`.
pub fn linear_objective(mp: &ModelParams, ds: &SampleSet, ridge: f64) -> Result<f64> {
    let misfit = crate::par::try_map_range(ds.len(), |k| {
        let s = &ds.samples[k];
        let geom = GeomFeatures::new(&s.cloud)?;
        let (u, _) = model_forward(mp, &geom, &s.a)?;
        let w = active_weights(s);
        Ok::<_, Error>(
            (0..w.len())
                .map(|i| (0..ds.d_u).map(|o| w[i] * (u[i * ds.d_u + o] - s.u[i * ds.d_u + o]).powi(2)).sum::<f64>())
                .sum::<f64>(),
        )
    })?;
    Ok(misfit.iter().sum::<f64>() + ridge * mp.theta.iter().map(|t| t * t).sum::<f64>())
}

/// Linear model for a 2D kernel with the normal modes that kernel needs.
pub fn linear_config_for(kernel: KernelKind, p: usize) -> ModelConfig {
    let mut cfg = ModelConfig::linear(2, kernel.d_f(), kernel.d_u(), p);
    cfg.source_normal = kernel.needs_ny();
    cfg.target_normal = kernel.needs_nx();
    cfg
}

// ---------------------------------------------------------------------------
// Adam with a OneCycle schedule.

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub peak_lr: f64,
    /// Fraction of steps spent increasing the learning rate.
    pub warmup_frac: f64,
    /// Initial rate is `peak_lr / div_factor`.
    pub div_factor: f64,
    /// Final rate is the initial rate divided by this.
    pub final_div_factor: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            epochs: 100,
            peak_lr: 1e-3,
            warmup_frac: 0.3,
            div_factor: 25.0,
            final_div_factor: 1e4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if !(self.peak_lr >= 0.0 && self.peak_lr.is_finite()) {
            return Err(Error::invalid("peak_lr must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) || self.div_factor <= 0.0 || self.final_div_factor <= 0.0 {
            return Err(Error::invalid("invalid OneCycle parameters"));
        }
        Ok(())
    }

    /// OneCycle learning rate at `step` of `total`, cosine in both phases.
    pub fn learning_rate(&self, step: u64, total: u64) -> f64 {
        let init = self.peak_lr / self.div_factor;
        let min = init / self.final_div_factor;
        let last = total.saturating_sub(1).max(1) as f64;
        let warm = self.warmup_frac * last;
        let s = step as f64;
        let cos_anneal = |a: f64, b: f64, t: f64| b + 0.5 * (a - b) * (1.0 + (PI * t.clamp(0.0, 1.0)).cos());
        if s <= warm && warm > 0.0 {
            cos_anneal(init, self.peak_lr, s / warm)
        } else {
            cos_anneal(self.peak_lr, min, (s - warm) / (last - warm).max(1e-300))
        }
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Optimizer state; together with the parameters it determines the rest of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Epochs completed.
    pub epoch: usize,
    /// Adam steps taken.
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Mean training loss per completed epoch.
    pub loss_history: Vec<f64>,
}

impl TrainState {
    pub fn new(n_params: usize) -> Self {
        TrainState { epoch: 0, step: 0, m: vec![0.0; n_params], v: vec![0.0; n_params], loss_history: Vec::new() }
    }
}

/// Sample order of one epoch, a pure function of `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mix = seed ^ (epoch as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let mut rng = ChaCha8Rng::seed_from_u64(mix);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

fn sample_loss_grad(mp: &ModelParams, geom: &GeomFeatures, s: &Sample, d_u: usize) -> Result<(f64, Vec<f64>)> {
    let (u, tape) = model_forward(mp, geom, &s.a)?;
    let (loss, du) = relative_l2_loss(&u, &s.u, &active_weights(s), d_u)?;
    let g = model_backward(mp, geom, &tape, &du)?;
    Ok((loss, g))
}

/// Run epochs `state.epoch .. until` in place.
pub fn train_epochs(
    mp: &mut ModelParams,
    state: &mut TrainState,
    ds: &SampleSet,
    geoms: &[GeomFeatures],
    cfg: &TrainConfig,
    until: usize,
) -> Result<()> {
    cfg.validate()?;
    check_dims(&mp.config, ds)?;
    if ds.is_empty() {
        return Err(Error::invalid("cannot train on an empty dataset"));
    }
    if state.m.len() != mp.n_params() || state.v.len() != mp.n_params() {
        return Err(Error::invalid("optimizer state does not match the model"));
    }
    let n = ds.len();
    let batches = n.div_ceil(cfg.batch_size);
    let total = (cfg.epochs * batches) as u64;
    while state.epoch < until.min(cfg.epochs) {
        let order = epoch_order(n, cfg.seed, state.epoch);
        let mut epoch_loss = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let results = crate::par::map_slice(batch, |&k| sample_loss_grad(mp, &geoms[k], &ds.samples[k], ds.d_u));
            let mut grad = vec![0.0; mp.n_params()];
            let mut loss = 0.0;
            for r in results {
                let (l, g) = r?;
                loss += l;
                for (a, b) in grad.iter_mut().zip(&g) {
                    *a += b;
                }
            }
            let scale = 1.0 / batch.len() as f64;
            loss *= scale;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::numerical(format!(
                    "non-finite loss or gradient at epoch {}, batch {b} (loss = {loss})",
                    state.epoch
                )));
            }
            epoch_loss += loss * batch.len() as f64;
            let lr = cfg.learning_rate(state.step, total);
            state.step += 1;
            let bc1 = 1.0 - BETA1.powi(state.step as i32);
            let bc2 = 1.0 - BETA2.powi(state.step as i32);
            for k in 0..grad.len() {
                let g = grad[k] * scale;
                state.m[k] = BETA1 * state.m[k] + (1.0 - BETA1) * g;
                state.v[k] = BETA2 * state.v[k] + (1.0 - BETA2) * g * g;
                let mhat = state.m[k] / bc1;
                let vhat = state.v[k] / bc2;
                mp.theta[k] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
        }
        state.loss_history.push(epoch_loss / n as f64);
        state.epoch += 1;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub state: TrainState,
}

/// Train from `mp` for `cfg.epochs` epochs.
pub fn train_adam(mp: &ModelParams, ds: &SampleSet, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let geoms = geometry_features(ds)?;
    let mut params = mp.clone();
    let mut state = TrainState::new(mp.n_params());
    train_epochs(&mut params, &mut state, ds, &geoms, cfg, cfg.epochs)?;
    Ok(TrainOutcome { params, state })
}

// ---------------------------------------------------------------------------
// Scaling experiments.

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalingConfig {
    pub arch: Architecture,
    pub kernel: KernelKind,
    pub ps: Vec<usize>,
    pub ns: Vec<usize>,
    /// Samples in each test set.
    pub n_test: usize,
    /// Panels per curve.
    pub n_points: usize,
    pub seed: u64,
    /// Relative ridge weight of the linear fit.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Deep model width and depth.
    #[serde(default = "default_width")]
    pub width: usize,
    #[serde(default = "default_layers")]
    pub layers: usize,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub grf: GrfSpec,
    /// Single-curve family; two-curve sets use [`CurveFamily::two_curve`].
    #[serde(default)]
    pub family: CurveFamily,
}

fn default_lambda() -> f64 {
    1e-6
}

fn default_width() -> usize {
    16
}

fn default_layers() -> usize {
    2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub model: Architecture,
    pub kernel: KernelKind,
    pub p: usize,
    pub n: usize,
    pub err_single: f64,
    pub err_two: f64,
}

/// Datasets of a scaling run: training (largest `n`), single-curve and two-curve test sets.
pub fn scaling_datasets(cfg: &ScalingConfig) -> Result<[SampleSet; 3]> {
    let n_train = cfg.ns.iter().copied().max().ok_or_else(|| Error::invalid("ns is empty"))?;
    let base = CurveDatasetConfig {
        grf: cfg.grf.clone(),
        family: cfg.family.clone(),
        ..CurveDatasetConfig::kernel(cfg.kernel, n_train, cfg.n_points, cfg.seed)
    };
    let train = generate_curve_dataset(&base)?;
    let single = generate_curve_dataset(&CurveDatasetConfig {
        n_samples: cfg.n_test,
        seed: cfg.seed.wrapping_add(1),
        ..base.clone()
    })?;
    let two = generate_curve_dataset(
        &CurveDatasetConfig { n_samples: cfg.n_test, seed: cfg.seed.wrapping_add(2), ..base }.into_two_curves(),
    )?;
    Ok([train, single, two])
}

/// Fit or train one model per `(p, n)` and evaluate on single- and two-curve test sets.
pub fn scaling_experiment(cfg: &ScalingConfig) -> Result<Vec<ScalingRow>> {
    let [train, single, two] = scaling_datasets(cfg)?;
    scaling_experiment_on(cfg, &train, &single, &two)
}

pub fn scaling_experiment_on(
    cfg: &ScalingConfig,
    train: &SampleSet,
    single: &SampleSet,
    two: &SampleSet,
) -> Result<Vec<ScalingRow>> {
    let g_single = geometry_features(single)?;
    let g_two = geometry_features(two)?;
    let mut rows = Vec::new();
    for &p in &cfg.ps {
        for &n in &cfg.ns {
            let subset = train.prefix(n);
            let params = match cfg.arch {
                Architecture::Linear => fit_linear_model(&subset, linear_config_for(cfg.kernel, p), cfg.lambda)?.0,
                Architecture::Deep => {
                    let mc = ModelConfig::deep(2, cfg.kernel.d_f(), cfg.kernel.d_u(), cfg.width, cfg.layers, p);
                    let init = ModelParams::init(mc, cfg.seed)?;
                    train_adam(&init, &subset, &cfg.train)?.params
                }
            };
            rows.push(ScalingRow {
                model: cfg.arch,
                kernel: cfg.kernel,
                p,
                n,
                err_single: evaluate_with(&params, single, &g_single)?.mean_rel_l2,
                err_two: evaluate_with(&params, two, &g_two)?.mean_rel_l2,
            });
        }
    }
    Ok(rows)
}

pub fn scaling_csv(rows: &[ScalingRow]) -> String {
    let mut out = String::from("model,kernel,p,n,err_single,err_two\n");
    for r in rows {
        let model = match r.model {
            Architecture::Linear => "linear",
            Architecture::Deep => "deep",
        };
        out.push_str(&format!("{model},{},{},{},{:.6e},{:.6e}\n", r.kernel, r.p, r.n, r.err_single, r.err_two));
    }
    out
}
