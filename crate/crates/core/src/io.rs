//! On-disk formats.
//!
//! Dataset layout:
//!
//! ```text
//! <out>/dataset.json                 DatasetManifest
//! <out>/seq_00000/manifest.json      SequenceManifest (labels only in labeled mode)
//! <out>/seq_00000/frame_<k>.csv      header `y,z,vr`, 9 significant digits
//! <out>/_oracle/labels.json          sealed ground truth for evaluation
//! ```
//!
//! Checkpoints (`*.vxck`): the magic line `VXCK1\n`, a little-endian `u64`
//! header length, the JSON header, then each tensor as little-endian `f32`
//! at the byte offset the header records, checked with SHA-256.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use vortexlab_tensor::{ParameterStore, Tensor};

use crate::data::{CenterPair, PointCloudFrame, ScanSequence};
use crate::error::{Result, VortexError};
use crate::sim::{Scenario, SimulatedSequence};

pub const DATASET_MANIFEST: &str = "dataset.json";
pub const SEQUENCE_MANIFEST: &str = "manifest.json";
pub const ORACLE_DIR: &str = "_oracle";
pub const ORACLE_LABELS: &str = "labels.json";
const CHECKPOINT_MAGIC: &[u8] = b"VXCK1\n";

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceManifest {
    pub sequence_id: String,
    pub scenario: Scenario,
    pub timestamps: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_id: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub centers: Option<Vec<CenterPair>>,
    /// Frames for which aerosol dropout had to be relaxed.
    pub relaxed_dropout: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleLabel {
    pub class_id: usize,
    /// Exact simulated centers.
    pub centers: Vec<CenterPair>,
    /// Centers as published to labeled manifests (with label noise, if any).
    pub observed_centers: Vec<CenterPair>,
}

fn sig9(v: f64) -> String {
    format!("{v:.8e}")
}

pub fn write_frame_csv(path: &Path, frame: &PointCloudFrame) -> Result<()> {
    let mut s = String::with_capacity(frame.points.len() * 48 + 8);
    s.push_str("y,z,vr\n");
    for p in &frame.points {
        let _ = writeln!(s, "{},{},{}", sig9(p[0]), sig9(p[1]), sig9(p[2]));
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn read_frame_csv(path: &Path, timestamp: f64) -> Result<PointCloudFrame> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("y,z,vr") {
        return Err(VortexError::Data(format!("{}: missing `y,z,vr` header", path.display())));
    }
    let mut points = Vec::new();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let vals: Vec<f64> = line
            .split(',')
            .map(|t| t.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| VortexError::Data(format!("{}:{}: {e}", path.display(), i + 2)))?;
        if vals.len() != 3 {
            return Err(VortexError::Data(format!("{}:{}: expected 3 columns", path.display(), i + 2)));
        }
        points.push([vals[0], vals[1], vals[2]]);
    }
    Ok(PointCloudFrame { timestamp, points })
}

pub fn write_simulated_sequence(out_dir: &Path, sim: &SimulatedSequence, labeled: bool) -> Result<()> {
    let dir = out_dir.join(&sim.sequence_id);
    fs::create_dir_all(&dir)?;
    for (k, f) in sim.frames.iter().enumerate() {
        write_frame_csv(&dir.join(format!("frame_{k}.csv")), f)?;
    }
    let manifest = SequenceManifest {
        sequence_id: sim.sequence_id.clone(),
        scenario: sim.scenario.clone(),
        timestamps: sim.frames.iter().map(|f| f.timestamp).collect(),
        class_id: labeled.then_some(sim.scenario.class_id),
        centers: labeled.then(|| sim.observed_centers.clone()),
        relaxed_dropout: sim.relaxed_dropout.clone(),
    };
    write_json(&dir.join(SEQUENCE_MANIFEST), &manifest)
}

pub fn write_oracle_labels(out_dir: &Path, sims: &[SimulatedSequence]) -> Result<()> {
    let dir = out_dir.join(ORACLE_DIR);
    fs::create_dir_all(&dir)?;
    let labels: BTreeMap<String, OracleLabel> = sims
        .iter()
        .map(|s| {
            (
                s.sequence_id.clone(),
                OracleLabel {
                    class_id: s.scenario.class_id,
                    centers: s.true_centers(),
                    observed_centers: s.observed_centers.clone(),
                },
            )
        })
        .collect();
    write_json(&dir.join(ORACLE_LABELS), &labels)
}

pub fn read_oracle_labels(dataset_dir: &Path) -> Result<BTreeMap<String, OracleLabel>> {
    read_json(&dataset_dir.join(ORACLE_DIR).join(ORACLE_LABELS))
}

pub fn read_sequence_manifest(seq_dir: &Path) -> Result<SequenceManifest> {
    read_json(&seq_dir.join(SEQUENCE_MANIFEST))
}

/// Reads one sequence directory. Labels come only from the manifest.
pub fn load_sequence(seq_dir: &Path) -> Result<ScanSequence> {
    let m = read_sequence_manifest(seq_dir)?;
    let frames = m
        .timestamps
        .iter()
        .enumerate()
        .map(|(k, &t)| read_frame_csv(&seq_dir.join(format!("frame_{k}.csv")), t))
        .collect::<Result<Vec<_>>>()?;
    Ok(ScanSequence { event_id: m.sequence_id, frames, class_id: m.class_id, centers: m.centers, centroid_removed: [0.0, 0.0] })
}

/// Loads every sequence listed in `dataset.json`, in manifest order.
pub fn load_dataset(dir: &Path) -> Result<Vec<ScanSequence>> {
    let manifest: crate::sim::DatasetManifest = read_json(&dir.join(DATASET_MANIFEST))?;
    manifest.sequences.iter().map(|id| load_sequence(&dir.join(id))).collect()
}

/// Trained weights plus enough metadata to rebuild the model that owns them.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ParameterStore,
    pub hyper: serde_json::Value,
    pub step: u64,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    nbytes: usize,
    sha256: String,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    step: u64,
    seed: u64,
    hyper: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Serializes a checkpoint. Values are stored as `f32`.
pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut blob = Vec::new();
    let mut entries = Vec::new();
    for (name, t) in ck.params.iter() {
        let offset = blob.len();
        for &v in t.data() {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
            nbytes: blob.len() - offset,
            sha256: hex_digest(&blob[offset..]),
        });
    }
    let header =
        serde_json::to_vec(&CheckpointHeader { step: ck.step, seed: ck.seed, hyper: ck.hyper.clone(), tensors: entries })?;
    let mut out = Vec::with_capacity(CHECKPOINT_MAGIC.len() + 8 + header.len() + blob.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&blob);
    Ok(out)
}

/// Parses a checkpoint; either every tensor verifies or nothing is returned.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let rest = bytes.strip_prefix(CHECKPOINT_MAGIC).ok_or_else(|| VortexError::CorruptHeader("bad magic".into()))?;
    if rest.len() < 8 {
        return Err(VortexError::CorruptHeader("truncated header length".into()));
    }
    let hlen = u64::from_le_bytes(rest[..8].try_into().unwrap()) as usize;
    let rest = &rest[8..];
    if rest.len() < hlen {
        return Err(VortexError::CorruptHeader("truncated header".into()));
    }
    let header: CheckpointHeader =
        serde_json::from_slice(&rest[..hlen]).map_err(|e| VortexError::CorruptHeader(e.to_string()))?;
    let blob = &rest[hlen..];
    let mut params = ParameterStore::new();
    for e in &header.tensors {
        let numel: usize = e.shape.iter().product();
        if e.nbytes != numel * 4 {
            return Err(VortexError::CorruptHeader(format!("size of `{}` disagrees with its shape", e.name)));
        }
        let bytes = blob.get(e.offset..e.offset + e.nbytes).ok_or_else(|| VortexError::Checksum(e.name.clone()))?;
        if hex_digest(bytes) != e.sha256 {
            return Err(VortexError::Checksum(e.name.clone()));
        }
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
        params.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
    }
    Ok(Checkpoint { params, hyper: header.hyper, step: header.step, seed: header.seed })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    fs::write(path, encode_checkpoint(ck)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}

impl Checkpoint {
    /// Errors unless the stored tensor names are exactly `expected`.
    pub fn verify_names<'a>(&self, expected: impl IntoIterator<Item = &'a String>) -> Result<()> {
        let expected: Vec<&String> = expected.into_iter().collect();
        for name in &expected {
            if !self.params.contains(name) {
                return Err(VortexError::MissingTensor((*name).clone()));
            }
        }
        if let Some(extra) = self.params.names().find(|n| !expected.contains(n)) {
            return Err(VortexError::Architecture(format!("unexpected tensor `{extra}`")));
        }
        Ok(())
    }
}

/// One row of `metrics.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub alignment: f64,
    pub uniformity: f64,
    pub lr: f64,
}

pub const METRICS_HEADER: &str = "epoch,split,loss,alignment,uniformity,lr";

pub fn metrics_to_csv(records: &[MetricRecord]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in records {
        let _ = writeln!(s, "{},{},{},{},{},{}", r.epoch, r.split, r.loss, r.alignment, r.uniformity, r.lr);
    }
    s
}

pub fn write_metrics_csv(path: &Path, records: &[MetricRecord]) -> Result<()> {
    fs::write(path, metrics_to_csv(records))?;
    Ok(())
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricRecord>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(METRICS_HEADER) {
        return Err(VortexError::Data(format!("metrics header must be `{METRICS_HEADER}`")));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 6 {
                return Err(VortexError::Data(format!("bad metrics row `{l}`")));
            }
            let num = |s: &str| s.trim().parse::<f64>().map_err(|e| VortexError::Data(format!("`{s}`: {e}")));
            Ok(MetricRecord {
                epoch: f[0].trim().parse().map_err(|e| VortexError::Data(format!("epoch: {e}")))?,
                split: f[1].trim().to_string(),
                loss: num(f[2])?,
                alignment: num(f[3])?,
                uniformity: num(f[4])?,
                lr: num(f[5])?,
            })
        })
        .collect()
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricRecord>> {
    parse_metrics_csv(&fs::read_to_string(path)?)
}
