//! `pcno`: dataset generation, fitting, training, evaluation and verification runs.

mod config;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use pcno::dataset::{sha256_hex, SampleSet};
use pcno::ewald::{measure_decomposition_error, EwaldConfig};
use pcno::io::{
    load_checkpoint, load_sample_set, sample_set_to_json, save_checkpoint, save_sample_set, Checkpoint,
    TrainingCheckpoint,
};
use pcno::operator::{Architecture, ModelParams};
use pcno::panel3d::{cp_report, flow_dataset, load_mesh, solve_potential_flow, CpReport, MeshFormat};
use pcno::train::{
    evaluate_with, fit_linear_model, geometry_features, scaling_csv, scaling_experiment, train_epochs, TrainState,
};

use crate::config::{check_file_name, invalid, load, ConfigError};

#[derive(Parser)]
#[command(name = "pcno", version, about = "Point cloud neural operators for boundary integrals")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the seed of the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a sample set with the panel-method reference solvers.
    GenData,
    /// Fit the linear model by least squares.
    Fit,
    /// Train a model with Adam.
    Train,
    /// Evaluate a checkpoint on sample sets.
    Eval,
    /// Kernel decomposition error over truncation levels.
    EwaldSweep,
    /// Potential flow around a mesh.
    Flow,
    /// Error over mode counts and training-set sizes.
    Scaling,
    /// Run the property suite.
    Verify,
}

const EXIT_VALIDATION: u8 = 1;
const EXIT_NUMERICAL: u8 = 2;
const EXIT_IO: u8 = 3;

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<pcno::Error>() {
            return match e {
                pcno::Error::Io(_) | pcno::Error::Format(_) => EXIT_IO,
                e if e.is_numerical() => EXIT_NUMERICAL,
                _ => EXIT_VALIDATION,
            };
        }
        if cause.downcast_ref::<ConfigError>().is_some() {
            return EXIT_VALIDATION;
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return EXIT_IO;
        }
    }
    EXIT_VALIDATION
}

/// Raised when verification checks fail.
#[derive(Debug)]
struct ChecksFailed(usize);

impl std::fmt::Display for ChecksFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} check(s) failed", self.0)
    }
}

impl std::error::Error for ChecksFailed {}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_VALIDATION) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.chain().any(|c| c.downcast_ref::<ChecksFailed>().is_some()) {
                return ExitCode::from(EXIT_NUMERICAL);
            }
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(ConfigError { path: "--threads".into(), message: "must be at least 1".into() }.into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring the thread pool")?;
    }
    let config = || cli.config.as_deref().ok_or_else(|| ConfigError { path: "--config".into(), message: "this command needs a config file".into() });
    match cli.command {
        Command::GenData => gen_data(cli, config()?),
        Command::Fit => fit(cli, config()?),
        Command::Train => train(cli, config()?),
        Command::Eval => eval(cli, config()?),
        Command::EwaldSweep => ewald_sweep(cli, config()?),
        Command::Flow => flow(cli, config()?),
        Command::Scaling => scaling(cli, config()?),
        Command::Verify => verify(cli),
    }
}

/// Create the output directory and write one file into it, logging its hash.
fn write_output(out: &Path, name: &str, bytes: &[u8]) -> Result<PathBuf> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let path = out.join(name);
    fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {} sha256={}", path.display(), sha256_hex(bytes));
    Ok(path)
}

fn log_file_hash(path: &Path) -> Result<()> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    println!("wrote {} sha256={}", path.display(), sha256_hex(&bytes));
    Ok(())
}

fn gen_data(cli: &Cli, path: &Path) -> Result<()> {
    let mut cfg: config::GenDataConfig = load(path)?;
    check_file_name(path, &cfg.output)?;
    let set = match (&mut cfg.curves, &cfg.flow) {
        (Some(curves), None) => {
            if let Some(s) = cli.seed {
                curves.seed = s;
            }
            curves.validate().map_err(|e| invalid(path, e.to_string()))?;
            pcno::dataset::generate_curve_dataset(curves)?
        }
        (None, Some(flow)) => {
            let meshes = flow
                .meshes
                .iter()
                .map(|m| load_mesh(m, MeshFormat::from_path(m)?).with_context(|| format!("loading {}", m.display())))
                .collect::<Result<Vec<_>>>()?;
            flow_dataset(&meshes, flow.v_inf, flow.n_max)?
        }
        _ => return Err(invalid(path, "exactly one of [curves] or [flow] is required")),
    };
    fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    let file = cli.out.join(&cfg.output);
    save_sample_set(&set, &file)?;
    log_file_hash(&file)?;
    if cfg.json {
        write_output(&cli.out, &format!("{}.json", cfg.output), sample_set_to_json(&set)?.as_bytes())?;
    }
    println!("samples={} n_max={} generator_hash={}", set.len(), set.n_max, set.provenance.hash);
    Ok(())
}

fn load_set(path: &Path) -> Result<SampleSet> {
    load_sample_set(path).with_context(|| format!("loading {}", path.display()))
}

fn fit(cli: &Cli, path: &Path) -> Result<()> {
    let cfg: config::FitConfig = load(path)?;
    check_file_name(path, &cfg.checkpoint)?;
    if cfg.model.arch != Architecture::Linear {
        return Err(invalid(path, "fit needs arch = \"linear\"; use `train` for deep models"));
    }
    let ds = load_set(&cfg.dataset)?;
    let model = cfg.model.build(ds.dims, ds.d_a, ds.d_u).map_err(|e| invalid(path, e.to_string()))?;
    let (params, report) = fit_linear_model(&ds, model, cfg.lambda)?;
    let train_err = evaluate_with(&params, &ds, &geometry_features(&ds)?)?.mean_rel_l2;
    fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    let ck = cli.out.join(&cfg.checkpoint);
    save_checkpoint(&Checkpoint { params, training: None }, &ck)?;
    log_file_hash(&ck)?;
    let csv = format!(
        "n_features,ridge,objective,train_mean_rel_l2\n{},{:.12e},{:.12e},{:.12e}\n",
        report.n_features, report.ridge, report.objective, train_err
    );
    write_output(&cli.out, &format!("{}.metrics.csv", cfg.checkpoint), csv.as_bytes())?;
    println!("train_mean_rel_l2={train_err:.6e}");
    Ok(())
}

fn train(cli: &Cli, path: &Path) -> Result<()> {
    let mut cfg: config::TrainFileConfig = load(path)?;
    check_file_name(path, &cfg.checkpoint)?;
    if let Some(s) = cli.seed {
        cfg.train.seed = s;
        cfg.init_seed = s;
    }
    cfg.train.validate().map_err(|e| invalid(path, e.to_string()))?;
    let ds = load_set(&cfg.dataset)?;
    let model = cfg.model.build(ds.dims, ds.d_a, ds.d_u).map_err(|e| invalid(path, e.to_string()))?;
    let ck_path = cli.out.join(&cfg.checkpoint);
    let (mut params, mut state) = if cfg.resume && ck_path.exists() {
        let ck = load_checkpoint(&ck_path)?;
        let t = ck.training.ok_or_else(|| invalid(path, "checkpoint has no optimizer state to resume from"))?;
        if ck.params.config != model || t.config != cfg.train {
            return Err(invalid(path, "checkpoint was produced by a different model or training configuration"));
        }
        println!("resuming at epoch {}", t.state.epoch);
        (ck.params, t.state)
    } else {
        let params = ModelParams::init(model, cfg.init_seed)?;
        let state = TrainState::new(params.n_params());
        (params, state)
    };
    let geoms = geometry_features(&ds)?;
    let until = cfg.stop_after.unwrap_or(cfg.train.epochs).min(cfg.train.epochs);
    fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    let save = |params: &ModelParams, state: &TrainState| -> Result<()> {
        let training = TrainingCheckpoint { config: cfg.train.clone(), state: state.clone() };
        let complete = training.complete();
        save_checkpoint(&Checkpoint { params: params.clone(), training: Some(training) }, &ck_path)?;
        if !complete {
            println!("partial checkpoint at epoch {}", state.epoch);
        }
        Ok(())
    };
    while state.epoch < until {
        let next = match cfg.checkpoint_every {
            0 => until,
            k => (state.epoch / k + 1) * k,
        }
        .min(until);
        train_epochs(&mut params, &mut state, &ds, &geoms, &cfg.train, next)?;
        println!("epoch {} loss {:.6e}", state.epoch, state.loss_history.last().copied().unwrap_or(f64::NAN));
        if state.epoch < until {
            save(&params, &state)?;
        }
    }
    save(&params, &state)?;
    log_file_hash(&ck_path)?;
    let mut csv = String::from("epoch,loss\n");
    for (e, l) in state.loss_history.iter().enumerate() {
        let _ = writeln!(csv, "{},{:.17e}", e + 1, l);
    }
    write_output(&cli.out, &format!("{}.loss.csv", cfg.checkpoint), csv.as_bytes())?;
    let train_err = evaluate_with(&params, &ds, &geoms)?.mean_rel_l2;
    write_output(
        &cli.out,
        &format!("{}.metrics.csv", cfg.checkpoint),
        format!("epochs,train_mean_rel_l2\n{},{:.17e}\n", state.epoch, train_err).as_bytes(),
    )?;
    println!("train_mean_rel_l2={train_err:.6e}");
    Ok(())
}

fn eval(cli: &Cli, path: &Path) -> Result<()> {
    let cfg: config::EvalConfig = load(path)?;
    check_file_name(path, &cfg.output)?;
    if cfg.datasets.is_empty() {
        return Err(invalid(path, "datasets is empty"));
    }
    let ck = load_checkpoint(&cfg.checkpoint).with_context(|| format!("loading {}", cfg.checkpoint.display()))?;
    let model = cfg.checkpoint.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let mut csv = String::from("model,dataset,n_samples,mean_rel_l2,per_sample\n");
    for d in &cfg.datasets {
        let ds = load_set(d)?;
        let rep = evaluate_with(&ck.params, &ds, &geometry_features(&ds)?).with_context(|| format!("evaluating on {}", d.display()))?;
        let per: Vec<String> = rep.per_sample.iter().map(|v| format!("{v:.17e}")).collect();
        let _ = writeln!(csv, "{model},{},{},{:.17e},{}", d.display(), ds.len(), rep.mean_rel_l2, per.join(";"));
        println!("{} mean_rel_l2={:.6e}", d.display(), rep.mean_rel_l2);
    }
    write_output(&cli.out, &cfg.output, csv.as_bytes())?;
    Ok(())
}

fn ewald_sweep(cli: &Cli, path: &Path) -> Result<()> {
    let cfg: config::EwaldSweepConfig = load(path)?;
    check_file_name(path, &cfg.output)?;
    if cfg.ps.is_empty() {
        return Err(invalid(path, "ps is empty"));
    }
    let mut csv = String::from("kernel,p,delta,epsilon,l1_error\n");
    for &p in &cfg.ps {
        let ec = EwaldConfig::theorem(p, cfg.gamma, cfg.alpha, cfg.q, cfg.box_half);
        ec.validate().map_err(|e| invalid(path, e.to_string()))?;
        let grid = cfg.grid_n.unwrap_or((8 * p).max(32));
        let r = measure_decomposition_error(cfg.kernel, &ec, grid)?;
        let _ = writeln!(csv, "{},{},{:.12e},{:.12e},{:.12e}", cfg.kernel, p, r.delta, r.epsilon, r.l1_error);
        println!("p={p} l1_error={:.6e}", r.l1_error);
    }
    write_output(&cli.out, &cfg.output, csv.as_bytes())?;
    Ok(())
}

fn flow(cli: &Cli, path: &Path) -> Result<()> {
    let cfg: config::FlowConfig = load(path)?;
    check_file_name(path, &cfg.output)?;
    let format = match cfg.format {
        Some(f) => f,
        None => MeshFormat::from_path(&cfg.mesh).map_err(|e| invalid(path, e.to_string()))?,
    };
    let mesh = load_mesh(&cfg.mesh, format).with_context(|| format!("loading {}", cfg.mesh.display()))?;
    if !mesh.watertight {
        eprintln!("warning: {} is not watertight", cfg.mesh.display());
    }
    let sol = solve_potential_flow(&mesh, cfg.v_inf)?;
    write_output(&cli.out, &format!("{}_cp.csv", cfg.output), sol.to_csv(&mesh).as_bytes())?;
    if cfg.sphere_report {
        let rep = cp_report(&mesh, cfg.v_inf, &sol.cp)?;
        let csv = format!("{}\n{}\n", CpReport::csv_header(), rep.csv_row());
        write_output(&cli.out, &format!("{}_report.csv", cfg.output), csv.as_bytes())?;
        println!("max_abs_err={:.6e}", rep.max_abs_err);
    }
    Ok(())
}

fn scaling(cli: &Cli, path: &Path) -> Result<()> {
    let mut cfg: config::ScalingFileConfig = load(path)?;
    check_file_name(path, &cfg.output)?;
    if let Some(s) = cli.seed {
        cfg.experiment.seed = s;
    }
    if cfg.experiment.ps.is_empty() || cfg.experiment.ns.is_empty() {
        return Err(invalid(path, "ps and ns must be non-empty"));
    }
    let rows = scaling_experiment(&cfg.experiment)?;
    let csv = scaling_csv(&rows);
    print!("{csv}");
    write_output(&cli.out, &cfg.output, csv.as_bytes())?;
    Ok(())
}

fn verify(cli: &Cli) -> Result<()> {
    let checks = pcno::verify::property_suite()?;
    let mut csv = String::from("check,pass,detail\n");
    for c in &checks {
        println!("{} {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
        let _ = writeln!(csv, "{},{},\"{}\"", c.name, c.pass, c.detail);
    }
    write_output(&cli.out, "verify.csv", csv.as_bytes())?;
    let failed = checks.iter().filter(|c| !c.pass).count();
    if failed > 0 {
        bail!(ChecksFailed(failed));
    }
    Ok(())
}
