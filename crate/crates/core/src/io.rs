//! Binary persistence of sample sets and model checkpoints.
//!
//! Both formats share one envelope:
//!
//! ```text
//! magic      8 bytes   b"PCNOSSET" (sample set) or b"PCNOCKPT" (checkpoint)
//! version    u32 LE
//! header_len u64 LE
//! header     header_len bytes of UTF-8 JSON
//! payload    f64 LE arrays, in the order and with the lengths listed in the header
//! ```
//!
//! Sample-set arrays are the concatenation over samples of `points`, `normals`,
//! `tangents`, `weights`, `curvature`, `mask` (0/1), `component`, `neighbor_count`,
//! `neighbors` (flattened), `a` and `u`. Integers are stored as exact f64 values.
//! Checkpoint arrays are `theta`, then `adam_m` and `adam_v` when optimizer state
//! is present. Floats round-trip bitwise.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{Provenance, Sample, SampleSet};
use crate::geometry::PointCloud;
use crate::operator::{ModelConfig, ModelParams, ParamBlock};
use crate::train::{TrainConfig, TrainState};
use crate::{Error, Result};

pub const SAMPLE_SET_MAGIC: &[u8; 8] = b"PCNOSSET";
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PCNOCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub len: usize,
}

fn encode(magic: &[u8; 8], header: &[u8], arrays: &[&[f64]]) -> Vec<u8> {
    let n: usize = arrays.iter().map(|a| a.len()).sum();
    let mut out = Vec::with_capacity(20 + header.len() + 8 * n);
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header);
    for a in arrays {
        for v in *a {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Split a file into its JSON header and payload after checking magic and version.
fn decode<'a>(magic: &[u8; 8], bytes: &'a [u8]) -> Result<(&'a [u8], &'a [u8])> {
    if bytes.len() < 20 || &bytes[..8] != magic {
        return Err(Error::Format(format!("missing {} magic", String::from_utf8_lossy(magic))));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported format version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let rest = &bytes[20..];
    if hlen > rest.len() {
        return Err(Error::Format("truncated header".into()));
    }
    Ok(rest.split_at(hlen))
}

/// Cut the payload into the arrays listed in the header.
fn split_payload(payload: &[u8], entries: &[ArrayEntry]) -> Result<Vec<Vec<f64>>> {
    let need: usize = entries.iter().map(|e| e.len).sum();
    if payload.len() != 8 * need {
        return Err(Error::Format(format!(
            "payload has {} bytes, header declares {}",
            payload.len(),
            8 * need
        )));
    }
    let mut off = 0;
    Ok(entries
        .iter()
        .map(|e| {
            let v = payload[off..off + 8 * e.len]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            off += 8 * e.len;
            v
        })
        .collect())
}

/// Write through a temporary file so an interrupted save never leaves a partial file.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Sample sets.

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleSetHeader {
    pub n_samples: usize,
    pub n_max: usize,
    pub dims: usize,
    pub d_a: usize,
    pub d_u: usize,
    pub generator_hash: String,
    pub provenance: Provenance,
    pub arrays: Vec<ArrayEntry>,
}

const SET_ARRAYS: [&str; 11] = [
    "points",
    "normals",
    "tangents",
    "weights",
    "curvature",
    "mask",
    "component",
    "neighbor_count",
    "neighbors",
    "a",
    "u",
];

pub fn sample_set_to_bytes(set: &SampleSet) -> Result<Vec<u8>> {
    set.validate()?;
    let mut cols: Vec<Vec<f64>> = vec![Vec::new(); SET_ARRAYS.len()];
    let has_tangents = set.samples.first().is_some_and(|s| !s.cloud.tangents.is_empty());
    for (k, s) in set.samples.iter().enumerate() {
        let c = &s.cloud;
        if c.tangents.is_empty() == has_tangents {
            return Err(Error::invalid(format!("sample {k}: tangents present in some samples only")));
        }
        cols[0].extend_from_slice(&c.points);
        cols[1].extend_from_slice(&c.normals);
        cols[2].extend_from_slice(&c.tangents);
        cols[3].extend_from_slice(&c.weights);
        cols[4].extend_from_slice(&c.curvature);
        cols[5].extend(c.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }));
        cols[6].extend(c.component.iter().map(|&v| v as f64));
        if c.neighbors.len() != c.len() && !c.neighbors.is_empty() {
            return Err(Error::invalid(format!("sample {k}: neighbor lists do not cover the cloud")));
        }
        cols[7].extend((0..c.len()).map(|i| c.neighbors.get(i).map_or(0, |l| l.len()) as f64));
        cols[8].extend(c.neighbors.iter().flatten().map(|&j| j as f64));
        cols[9].extend_from_slice(&s.a);
        cols[10].extend_from_slice(&s.u);
    }
    let header = SampleSetHeader {
        n_samples: set.len(),
        n_max: set.n_max,
        dims: set.dims,
        d_a: set.d_a,
        d_u: set.d_u,
        generator_hash: set.provenance.hash.clone(),
        provenance: set.provenance.clone(),
        arrays: SET_ARRAYS.iter().zip(&cols).map(|(n, c)| ArrayEntry { name: n.to_string(), len: c.len() }).collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let refs: Vec<&[f64]> = cols.iter().map(|c| c.as_slice()).collect();
    Ok(encode(SAMPLE_SET_MAGIC, &json, &refs))
}

fn as_index(v: f64, what: &str) -> Result<usize> {
    if v >= 0.0 && v.fract() == 0.0 && v < 2f64.powi(53) {
        Ok(v as usize)
    } else {
        Err(Error::Format(format!("{what} entry {v} is not an index")))
    }
}

pub fn sample_set_from_bytes(bytes: &[u8]) -> Result<SampleSet> {
    let (hbytes, payload) = decode(SAMPLE_SET_MAGIC, bytes)?;
    let h: SampleSetHeader = serde_json::from_slice(hbytes)?;
    let names: Vec<&str> = h.arrays.iter().map(|e| e.name.as_str()).collect();
    if names != SET_ARRAYS {
        return Err(Error::Format(format!("unexpected array list {names:?}")));
    }
    if h.generator_hash != h.provenance.hash {
        return Err(Error::Format("generator hash does not match provenance".into()));
    }
    let cols = split_payload(payload, &h.arrays)?;
    let (s, n, d) = (h.n_samples, h.n_max, h.dims);
    let tangents_per = if s > 0 && !cols[2].is_empty() { n * d } else { 0 };
    let expect = [s * n * d, s * n * d, s * tangents_per, s * n, s * n, s * n, s * n, s * n, cols[8].len(), s * n * h.d_a, s * n * h.d_u];
    for ((e, c), name) in expect.iter().zip(&cols).zip(SET_ARRAYS) {
        if *e != c.len() {
            return Err(Error::Format(format!("array {name} has {} values, expected {e}", c.len())));
        }
    }
    let counts = cols[7].iter().map(|&v| as_index(v, "neighbor_count")).collect::<Result<Vec<_>>>()?;
    if counts.iter().sum::<usize>() != cols[8].len() {
        return Err(Error::Format("neighbor counts do not match the neighbor array".into()));
    }
    let mut set = SampleSet::new(d, h.d_a, h.d_u, n, h.provenance.clone());
    let mut nb_off = 0;
    for k in 0..s {
        let slice = |c: usize, per: usize| cols[c][k * per..(k + 1) * per].to_vec();
        let mut neighbors = Vec::with_capacity(n);
        for i in 0..n {
            let cnt = counts[k * n + i];
            let list = cols[8][nb_off..nb_off + cnt]
                .iter()
                .map(|&v| as_index(v, "neighbors").and_then(|j| if j < n { Ok(j) } else { Err(Error::Format("neighbor index out of range".into())) }))
                .collect::<Result<Vec<_>>>()?;
            nb_off += cnt;
            neighbors.push(list);
        }
        if neighbors.iter().all(|l| l.is_empty()) {
            neighbors.clear();
        }
        let cloud = PointCloud {
            dims: d,
            points: slice(0, n * d),
            normals: slice(1, n * d),
            tangents: slice(2, tangents_per),
            weights: slice(3, n),
            curvature: slice(4, n),
            mask: cols[5][k * n..(k + 1) * n].iter().map(|&m| m != 0.0).collect(),
            component: cols[6][k * n..(k + 1) * n].iter().map(|&v| as_index(v, "component").map(|c| c as u32)).collect::<Result<_>>()?,
            neighbors,
        };
        set.samples.push(Sample { cloud, a: slice(9, n * h.d_a), u: slice(10, n * h.d_u) });
    }
    set.validate()?;
    Ok(set)
}

pub fn save_sample_set(set: &SampleSet, path: &Path) -> Result<()> {
    write_atomic(path, &sample_set_to_bytes(set)?)
}

pub fn load_sample_set(path: &Path) -> Result<SampleSet> {
    sample_set_from_bytes(&fs::read(path)?)
}

/// Human-readable JSON export; floats are written with round-trip precision.
pub fn sample_set_to_json(set: &SampleSet) -> Result<String> {
    Ok(serde_json::to_string_pretty(set)?)
}

// ---------------------------------------------------------------------------
// Checkpoints.

/// Optimizer state saved with a model so training can resume.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingCheckpoint {
    pub config: TrainConfig,
    pub state: TrainState,
}

impl TrainingCheckpoint {
    /// False when the run stopped before its last epoch.
    pub fn complete(&self) -> bool {
        self.state.epoch >= self.config.epochs
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub training: Option<TrainingCheckpoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainingHeader {
    config: TrainConfig,
    epoch: usize,
    step: u64,
    loss_history: Vec<f64>,
    complete: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub n_params: usize,
    /// Named parameter blocks inside `theta`.
    pub shapes: Vec<ParamBlock>,
    training: Option<TrainingHeader>,
    pub arrays: Vec<ArrayEntry>,
}

pub fn checkpoint_to_bytes(ck: &Checkpoint) -> Result<Vec<u8>> {
    let p = &ck.params;
    let n = p.n_params();
    let mut arrays = vec![ArrayEntry { name: "theta".into(), len: n }];
    let mut data: Vec<&[f64]> = vec![&p.theta];
    let training = match &ck.training {
        None => None,
        Some(t) => {
            if t.state.m.len() != n || t.state.v.len() != n {
                return Err(Error::invalid("optimizer state does not match the model"));
            }
            arrays.push(ArrayEntry { name: "adam_m".into(), len: n });
            arrays.push(ArrayEntry { name: "adam_v".into(), len: n });
            data.push(&t.state.m);
            data.push(&t.state.v);
            Some(TrainingHeader {
                config: t.config.clone(),
                epoch: t.state.epoch,
                step: t.state.step,
                loss_history: t.state.loss_history.clone(),
                complete: t.complete(),
            })
        }
    };
    let header = CheckpointHeader {
        model: p.config.clone(),
        n_params: n,
        shapes: p.layout.blocks().into_iter().cloned().collect(),
        training,
        arrays,
    };
    Ok(encode(CHECKPOINT_MAGIC, &serde_json::to_vec(&header)?, &data))
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let (hbytes, payload) = decode(CHECKPOINT_MAGIC, bytes)?;
    let h: CheckpointHeader = serde_json::from_slice(hbytes)?;
    let expected: Vec<&str> = if h.training.is_some() { vec!["theta", "adam_m", "adam_v"] } else { vec!["theta"] };
    let names: Vec<&str> = h.arrays.iter().map(|e| e.name.as_str()).collect();
    if names != expected || h.arrays.iter().any(|e| e.len != h.n_params) {
        return Err(Error::Format(format!("unexpected checkpoint arrays {names:?}")));
    }
    let mut cols = split_payload(payload, &h.arrays)?.into_iter();
    let params = ModelParams::from_theta(h.model, cols.next().unwrap()).map_err(|e| Error::Format(e.to_string()))?;
    let shapes: Vec<ParamBlock> = params.layout.blocks().into_iter().cloned().collect();
    if shapes != h.shapes {
        return Err(Error::Format("shape table does not match the model configuration".into()));
    }
    let training = h.training.map(|t| TrainingCheckpoint {
        config: t.config,
        state: TrainState {
            epoch: t.epoch,
            step: t.step,
            m: cols.next().unwrap(),
            v: cols.next().unwrap(),
            loss_history: t.loss_history,
        },
    });
    Ok(Checkpoint { params, training })
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    write_atomic(path, &checkpoint_to_bytes(ck)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    checkpoint_from_bytes(&fs::read(path)?)
}
