//! Property suite shared by the `verify` command and the acceptance tests.

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dataset::{generate_curve_dataset, CurveDatasetConfig};
use crate::geometry::{make_single_curve_cloud, sample_grf, CurveFamily, GrfSpec};
use crate::io::{checkpoint_to_bytes, sample_set_from_bytes, sample_set_to_bytes, Checkpoint, TrainingCheckpoint};
use crate::kernels::{verify_regularity_bounds, KernelKind};
use crate::operator::{k_long_apply, model_forward, DomainMode, GeomFeatures, ModelConfig, ModelParams};
use crate::train::{train_adam, TrainConfig};
use crate::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, pass: bool, detail: impl Into<String>) -> Self {
        Check { name: name.into(), pass, detail: detail.into() }
    }
}

/// Outputs of a deep model on a shuffled cloud equal the shuffled outputs bitwise.
pub fn permutation_equivariance() -> Result<Check> {
    let n = 96;
    let cloud = make_single_curve_cloud(12, n, &CurveFamily::default())?;
    let a = sample_grf(&cloud, &GrfSpec { seed: 3, ..GrfSpec::default() })?;
    let mp = ModelParams::init(ModelConfig::deep(2, 1, 1, 8, 2, 4), 1)?;
    let (u, _) = model_forward(&mp, &GeomFeatures::new(&cloud)?, &a)?;
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(77));
    let pc = cloud.permute(&perm);
    let pa: Vec<f64> = perm.iter().map(|&j| a[j]).collect();
    let (pu, _) = model_forward(&mp, &GeomFeatures::new(&pc)?, &pa)?;
    let mismatches = (0..n).filter(|&i| pu[i].to_bits() != u[perm[i]].to_bits()).count();
    Ok(Check::new("permutation equivariance (bitwise)", mismatches == 0, format!("{mismatches} of {n} outputs differ")))
}

/// The full complex mode sum of the stored half spectrum has no imaginary part and
/// matches the real long-range output.
pub fn real_output_residue() -> Result<Check> {
    let n = 48;
    let cloud = make_single_curve_cloud(5, n, &CurveFamily::default())?;
    let geom = GeomFeatures::new(&cloud)?;
    let w = 2;
    let mut cfg = ModelConfig::deep(2, 1, 1, w, 1, 3);
    cfg.mode = DomainMode::Volume;
    let mp = ModelParams::init(cfg, 11)?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let f: Vec<f64> = (0..n * w).map(|_| StandardNormal.sample(&mut rng)).collect();
    let ours = k_long_apply(&mp.layer(0), &geom, &f)?;
    let l = mp.config.box_half.clone();
    let spectrum = mp.full_spectrum(&mp.layout.layers[0].fourier);
    let (mut worst_im, mut worst_re) = (0.0f64, 0.0f64);
    for i in 0..n {
        let x = cloud.point(i);
        for o in 0..w {
            let mut acc = Complex64::new(0.0, 0.0);
            for (k, wk) in &spectrum {
                for c in 0..w {
                    let mut s = Complex64::new(0.0, 0.0);
                    for j in 0..n {
                        let y = cloud.point(j);
                        let ph = std::f64::consts::PI * (k[0] as f64 * (x[0] - y[0]) / l[0] + k[1] as f64 * (x[1] - y[1]) / l[1]);
                        s += Complex64::from_polar(1.0, ph) * (f[j * w + c] * cloud.weights[j]);
                    }
                    acc += wk[o * w + c] * s;
                }
            }
            worst_im = worst_im.max(acc.im.abs());
            worst_re = worst_re.max((acc.re - ours[i * w + o]).abs());
        }
    }
    Ok(Check::new(
        "real-output residue",
        worst_im <= 1e-12 && worst_re <= 1e-11,
        format!("max |Im| = {worst_im:.2e}, max |Re − output| = {worst_re:.2e}"),
    ))
}

fn tiny_dataset(seed: u64) -> Result<crate::dataset::SampleSet> {
    generate_curve_dataset(&CurveDatasetConfig::kernel(KernelKind::SingleLayer2D, 6, 48, seed))
}

/// Two identical training runs produce byte-identical checkpoints.
pub fn training_determinism() -> Result<Check> {
    let ds = tiny_dataset(4)?;
    let cfg = TrainConfig { batch_size: 2, epochs: 3, seed: 9, ..TrainConfig::default() };
    let init = ModelParams::init(ModelConfig::deep(2, 1, 1, 4, 2, 3), 5)?;
    let run = || -> Result<Vec<u8>> {
        let out = train_adam(&init, &ds, &cfg)?;
        checkpoint_to_bytes(&Checkpoint {
            params: out.params,
            training: Some(TrainingCheckpoint { config: cfg.clone(), state: out.state }),
        })
    };
    let (a, b) = (run()?, run()?);
    Ok(Check::new("training determinism (bitwise checkpoints)", a == b, format!("{} bytes", a.len())))
}

/// Save → load → save of a sample set is the identity on values and bytes.
pub fn dataset_round_trip() -> Result<Check> {
    let mut cfg = CurveDatasetConfig::kernel(KernelKind::AdjointDoubleLayer2D, 3, 40, 8).into_two_curves();
    cfg.n_max = 96;
    let ds = generate_curve_dataset(&cfg)?;
    let bytes = sample_set_to_bytes(&ds)?;
    let back = sample_set_from_bytes(&bytes)?;
    let again = sample_set_to_bytes(&back)?;
    Ok(Check::new("dataset round trip (bitwise)", back == ds && again == bytes, format!("{} bytes", bytes.len())))
}

/// Derivative decay bounds of every kernel near the origin.
pub fn regularity_bounds() -> Result<Vec<Check>> {
    KernelKind::ALL
        .iter()
        .map(|&k| {
            let r = verify_regularity_bounds(k, 1.0, 2000, 1)?;
            Ok(Check::new(
                format!("regularity bounds {k}"),
                r.pass,
                format!("max ratios {:.3} {:.3} {:.3}", r.max_ratio[0], r.max_ratio[1], r.max_ratio[2]),
            ))
        })
        .collect()
}

/// Every property check, in a fixed order.
pub fn property_suite() -> Result<Vec<Check>> {
    let mut out = vec![permutation_equivariance()?, real_output_residue()?, training_determinism()?, dataset_round_trip()?];
    out.extend(regularity_bounds()?);
    Ok(out)
}
