//! Experiment configuration files.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use pcno::dataset::CurveDatasetConfig;
use pcno::kernels::KernelKind;
use pcno::operator::{Architecture, DomainMode, ModelConfig};
use pcno::panel3d::MeshFormat;
use pcno::train::{ScalingConfig, TrainConfig};
use serde::de::DeserializeOwned;
use serde::Deserialize;

/// A configuration file that failed to parse or validate.
#[derive(Debug)]
pub struct ConfigError {
    pub path: String,
    pub message: String,
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

impl std::error::Error for ConfigError {}

pub fn load<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    toml::from_str(&text).map_err(|e| ConfigError { path: path.display().to_string(), message: e.to_string() }.into())
}

pub fn invalid(path: &Path, message: impl Into<String>) -> anyhow::Error {
    ConfigError { path: path.display().to_string(), message: message.into() }.into()
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenDataConfig {
    /// File name inside the output directory.
    pub output: String,
    /// Also write a JSON text export next to the binary file.
    #[serde(default)]
    pub json: bool,
    pub curves: Option<CurveDatasetConfig>,
    pub flow: Option<FlowDataConfig>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowDataConfig {
    pub meshes: Vec<PathBuf>,
    pub v_inf: [f64; 3],
    #[serde(default)]
    pub n_max: usize,
}

/// Model fields not implied by the dataset.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub arch: Architecture,
    pub p: usize,
    pub width: Option<usize>,
    pub layers: Option<usize>,
    pub mode: Option<DomainMode>,
    pub box_half: Option<Vec<f64>>,
    #[serde(default)]
    pub source_normal: bool,
    #[serde(default)]
    pub target_normal: bool,
}

impl ModelSpec {
    pub fn build(&self, dims: usize, d_a: usize, d_u: usize) -> pcno::Result<ModelConfig> {
        let mut cfg = match self.arch {
            Architecture::Linear => ModelConfig::linear(dims, d_a, d_u, self.p),
            Architecture::Deep => {
                let width = self.width.unwrap_or(16);
                ModelConfig::deep(dims, d_a, d_u, width, self.layers.unwrap_or(2), self.p)
            }
        };
        if let Some(m) = self.mode {
            cfg.mode = m;
        }
        if let Some(b) = &self.box_half {
            cfg.box_half = b.clone();
        }
        cfg.source_normal = self.source_normal;
        cfg.target_normal = self.target_normal;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    pub dataset: PathBuf,
    /// File name inside the output directory.
    pub checkpoint: String,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    pub model: ModelSpec,
}

fn default_lambda() -> f64 {
    1e-6
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainFileConfig {
    pub dataset: PathBuf,
    /// File name inside the output directory.
    pub checkpoint: String,
    #[serde(default)]
    pub init_seed: u64,
    /// Continue from the checkpoint in the output directory when it exists.
    #[serde(default)]
    pub resume: bool,
    /// Stop after this many epochs in total and save a partial checkpoint.
    pub stop_after: Option<usize>,
    /// Save a partial checkpoint every this many epochs; 0 disables.
    #[serde(default)]
    pub checkpoint_every: usize,
    pub model: ModelSpec,
    #[serde(default)]
    pub train: TrainConfig,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub checkpoint: PathBuf,
    pub datasets: Vec<PathBuf>,
    pub output: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EwaldSweepConfig {
    pub kernel: KernelKind,
    pub ps: Vec<usize>,
    #[serde(default = "unit_box")]
    pub box_half: [f64; 2],
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_q")]
    pub q: f64,
    /// Fourier-coefficient grid; `max(8p, 32)` when absent.
    pub grid_n: Option<usize>,
    pub output: String,
}

fn unit_box() -> [f64; 2] {
    [0.5, 0.5]
}

fn default_gamma() -> f64 {
    0.9
}

fn default_alpha() -> f64 {
    0.01
}

fn default_q() -> f64 {
    1.0
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    pub mesh: PathBuf,
    pub format: Option<MeshFormat>,
    pub v_inf: [f64; 3],
    /// Compare against the analytic sphere profile.
    #[serde(default)]
    pub sphere_report: bool,
    /// Prefix of the output files.
    pub output: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalingFileConfig {
    pub output: String,
    pub experiment: ScalingConfig,
}

/// Output file names must stay inside the output directory.
pub fn check_file_name(config: &Path, name: &str) -> Result<()> {
    let p = Path::new(name);
    let plain = p.components().count() == 1 && p.file_name().is_some_and(|f| f == p.as_os_str());
    if name.is_empty() || !plain {
        return Err(invalid(config, format!("output name {name:?} must be a plain file name")));
    }
    Ok(())
}
