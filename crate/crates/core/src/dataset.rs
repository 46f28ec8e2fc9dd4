//! Sample sets of `(geometry, input a, reference output u)` triples and their generators.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::geometry::{
    build_neighbor_lists, default_k, discretize_curve, generate_random_curve, generate_two_curves,
    remove_weighted_mean, sample_grf, two_curve_cloud_from, Curve, CurveFamily, GrfSpec, PointCloud,
};
use crate::kernels::KernelKind;
use crate::panel2d::{apply_dense, assemble_dense, solve_exterior_neumann};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    /// Cloud padded to the set's `n_max`.
    pub cloud: PointCloud,
    /// `n_max × d_a`.
    pub a: Vec<f64>,
    /// `n_max × d_u`.
    pub u: Vec<f64>,
}

impl Sample {
    pub fn n_active(&self) -> usize {
        self.cloud.n_active()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// Canonical JSON of the generator configuration.
    pub generator: String,
    /// SHA-256 of `generator`, hex encoded.
    pub hash: String,
}

impl Provenance {
    pub fn from_config<T: Serialize>(cfg: &T) -> Result<Self> {
        let generator = serde_json::to_string(cfg)?;
        Ok(Provenance { hash: sha256_hex(generator.as_bytes()), generator })
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleSet {
    pub dims: usize,
    pub d_a: usize,
    pub d_u: usize,
    pub n_max: usize,
    pub samples: Vec<Sample>,
    pub provenance: Provenance,
}

impl SampleSet {
    pub fn new(dims: usize, d_a: usize, d_u: usize, n_max: usize, provenance: Provenance) -> Self {
        SampleSet { dims, d_a, d_u, n_max, samples: Vec::new(), provenance }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Pad and append one sample.
    pub fn push(&mut self, cloud: &PointCloud, a: &[f64], u: &[f64]) -> Result<()> {
        let n = cloud.len();
        if cloud.dims != self.dims || a.len() != n * self.d_a || u.len() != n * self.d_u {
            return Err(Error::invalid("sample shapes do not match the set"));
        }
        let cloud = cloud.pad(self.n_max)?;
        let mut a = a.to_vec();
        a.resize(self.n_max * self.d_a, 0.0);
        let mut u = u.to_vec();
        u.resize(self.n_max * self.d_u, 0.0);
        self.samples.push(Sample { cloud, a, u });
        Ok(())
    }

    /// First `n` samples.
    pub fn prefix(&self, n: usize) -> Self {
        SampleSet { samples: self.samples[..n.min(self.len())].to_vec(), ..self.clone_header() }
    }

    fn clone_header(&self) -> Self {
        SampleSet {
            dims: self.dims,
            d_a: self.d_a,
            d_u: self.d_u,
            n_max: self.n_max,
            samples: Vec::new(),
            provenance: self.provenance.clone(),
        }
    }

    /// Shapes, masks and padding agree with the header.
    pub fn validate(&self) -> Result<()> {
        for (k, s) in self.samples.iter().enumerate() {
            let c = &s.cloud;
            let n = self.n_max;
            let ok = c.dims == self.dims
                && c.len() == n
                && c.points.len() == n * self.dims
                && c.normals.len() == n * self.dims
                && s.a.len() == n * self.d_a
                && s.u.len() == n * self.d_u;
            if !ok {
                return Err(Error::Format(format!("sample {k} has inconsistent shapes")));
            }
            if (0..n).any(|i| !c.mask[i] && c.weights[i] != 0.0) {
                return Err(Error::Format(format!("sample {k} has weight on a padded point")));
            }
        }
        Ok(())
    }
}

/// Which reference operator produces `u`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CurveTask {
    /// `u = ∫ κ f` by the dense panel method.
    Kernel { kernel: KernelKind },
    /// Neumann-to-Dirichlet map of the exterior Laplace problem.
    Neumann,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "CurveDatasetFields")]
pub struct CurveDatasetConfig {
    pub task: CurveTask,
    pub n_samples: usize,
    /// Panels per curve.
    pub n_points: usize,
    /// Padding length; at least `n_points` (twice that for two curves).
    pub n_max: usize,
    pub seed: u64,
    pub two_curves: bool,
    pub family: CurveFamily,
    pub grf: GrfSpec,
}

/// Serialized form; an omitted family follows `two_curves`.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CurveDatasetFields {
    task: CurveTask,
    n_samples: usize,
    n_points: usize,
    n_max: usize,
    seed: u64,
    #[serde(default)]
    two_curves: bool,
    family: Option<CurveFamily>,
    #[serde(default)]
    grf: GrfSpec,
}

impl From<CurveDatasetFields> for CurveDatasetConfig {
    fn from(f: CurveDatasetFields) -> Self {
        let family = f.family.unwrap_or_else(|| if f.two_curves { CurveFamily::two_curve() } else { CurveFamily::default() });
        CurveDatasetConfig {
            task: f.task,
            n_samples: f.n_samples,
            n_points: f.n_points,
            n_max: f.n_max,
            seed: f.seed,
            two_curves: f.two_curves,
            family,
            grf: f.grf,
        }
    }
}

impl CurveDatasetConfig {
    pub fn kernel(kernel: KernelKind, n_samples: usize, n_points: usize, seed: u64) -> Self {
        CurveDatasetConfig {
            task: CurveTask::Kernel { kernel },
            n_samples,
            n_points,
            n_max: n_points,
            seed,
            two_curves: false,
            family: CurveFamily::default(),
            grf: GrfSpec::default(),
        }
    }

    /// Same task on two-curve geometries with the smaller curve family.
    pub fn into_two_curves(mut self) -> Self {
        self.two_curves = true;
        self.family = CurveFamily::two_curve();
        self.n_max = self.n_max.max(2 * self.n_points);
        self
    }

    pub fn d_a(&self) -> usize {
        match self.task {
            CurveTask::Kernel { kernel } => kernel.d_f(),
            CurveTask::Neumann => 1,
        }
    }

    pub fn d_u(&self) -> usize {
        match self.task {
            CurveTask::Kernel { kernel } => kernel.d_u(),
            CurveTask::Neumann => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let CurveTask::Kernel { kernel } = self.task {
            if kernel.dims() != 2 {
                return Err(Error::invalid(format!("{kernel} is not a 2D kernel")));
            }
        }
        let per = if self.two_curves { 2 * self.n_points } else { self.n_points };
        if self.n_max < per {
            return Err(Error::invalid(format!("n_max = {} is below the {per} points per sample", self.n_max)));
        }
        if self.n_samples == 0 {
            return Err(Error::invalid("n_samples must be positive"));
        }
        Ok(())
    }
}

/// Independent per-sample seeds drawn from the set seed.
fn sample_seeds(seed: u64, n: usize) -> Vec<(u64, u64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (rng.random(), rng.random())).collect()
}

fn with_sample_index<T>(k: usize, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Numerical(m) => Error::Numerical(format!("sample {k}: {m}")),
        Error::InvalidInput(m) => Error::InvalidInput(format!("sample {k}: {m}")),
        other => other,
    })
}

/// One curve-task sample: geometry, input and panel-method reference.
fn curve_sample(cfg: &CurveDatasetConfig, geo_seed: u64, grf_seed: u64) -> Result<(PointCloud, Vec<f64>, Vec<f64>)> {
    let cloud = if cfg.two_curves {
        let [a, b] = generate_two_curves(geo_seed, &cfg.family)?;
        two_curve_cloud_from(&a, &b, cfg.n_points)?
    } else {
        let c = generate_random_curve(geo_seed, &cfg.family)?;
        make_single_curve_cloud_from(&c, cfg.n_points)?
    };
    let spec = GrfSpec { seed: grf_seed, channels: cfg.d_a(), ..cfg.grf.clone() };
    let mut a = sample_grf(&cloud, &spec)?;
    let u = match cfg.task {
        CurveTask::Kernel { kernel } => apply_dense(&assemble_dense(kernel, &cloud)?, &a)?,
        CurveTask::Neumann => {
            remove_weighted_mean(&cloud, &mut a);
            solve_exterior_neumann(&cloud, &a)?.phi
        }
    };
    Ok((cloud, a, u))
}

fn make_single_curve_cloud_from(c: &Curve, n: usize) -> Result<PointCloud> {
    build_neighbor_lists(&discretize_curve(c, n)?, default_k(2))
}

/// Generate a curve dataset; samples are independent and generated in parallel.
pub fn generate_curve_dataset(cfg: &CurveDatasetConfig) -> Result<SampleSet> {
    cfg.validate()?;
    let seeds = sample_seeds(cfg.seed, cfg.n_samples);
    let raw = crate::par::try_map_range(cfg.n_samples, |k| {
        with_sample_index(k, curve_sample(cfg, seeds[k].0, seeds[k].1))
    })?;
    let mut set = SampleSet::new(2, cfg.d_a(), cfg.d_u(), cfg.n_max, Provenance::from_config(cfg)?);
    for (cloud, a, u) in raw {
        set.push(&cloud, &a, &u)?;
    }
    Ok(set)
}

/// Neumann-to-Dirichlet samples on single random curves with `n_max` panels each.
pub fn neumann_to_dirichlet_dataset(n: usize, n_max: usize, seed: u64) -> Result<SampleSet> {
    let cfg = CurveDatasetConfig {
        task: CurveTask::Neumann,
        n_samples: n,
        n_points: n_max,
        n_max,
        seed,
        two_curves: false,
        family: CurveFamily::default(),
        grf: GrfSpec::default(),
    };
    generate_curve_dataset(&cfg)
}
