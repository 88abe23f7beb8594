//! The X-VORTEX network: per-point MLP with max-pool, LSTM (or mean-pool)
//! aggregator, projection head, soft-center head and forecast head.
//!
//! Parameters live in a [`ParameterStore`] under stable names:
//! `encoder.<k>.{weight,bias}`, `lstm.{w_ih,w_hh,bias}`, `proj.<k>.*`,
//! `center.<k>.*`, `forecast.<k>.*`.

use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use vortexlab_tensor::init::xavier_uniform;
use vortexlab_tensor::nn::{lstm_cell, LstmWeights};
use vortexlab_tensor::{Graph, ParameterStore, Tensor, Var};

use crate::data::ScanSequence;
use crate::error::{Result, VortexError};
use crate::io::Checkpoint;
use crate::rng;

pub const ENCODER: &str = "encoder.";
pub const LSTM: &str = "lstm.";
pub const PROJ: &str = "proj.";
pub const CENTER: &str = "center.";
pub const FORECAST: &str = "forecast.";
const CENTER_EPS: f64 = 1e-12;
const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregator {
    Lstm,
    MeanPool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Per-point MLP widths, starting with the 3 input channels.
    pub point_widths: Vec<usize>,
    /// LSTM hidden size.
    pub hidden: usize,
    /// Projection head widths after the embedding.
    pub proj_widths: Vec<usize>,
    pub center_hidden: usize,
    pub forecast_hidden: usize,
    pub aggregator: Aggregator,
    /// Fixed per-channel multipliers applied to `(y, z, v_r)` on input.
    pub input_scale: [f64; 3],
    /// Forecast outputs are multiplied by this to give metres.
    pub coord_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            point_widths: vec![3, 64, 128, 256],
            hidden: 256,
            proj_widths: vec![128, 64],
            center_hidden: 64,
            forecast_hidden: 128,
            aggregator: Aggregator::Lstm,
            input_scale: [0.01, 0.01, 0.1],
            coord_scale: 100.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.point_widths.len() < 2 || self.point_widths[0] != 3 {
            return Err(VortexError::Config("point_widths must start at 3 and have at least one layer".into()));
        }
        let all =
            self.point_widths.iter().chain(&self.proj_widths).chain([&self.hidden, &self.center_hidden, &self.forecast_hidden]);
        if all.into_iter().any(|w| *w == 0) || self.proj_widths.is_empty() {
            return Err(VortexError::Config("all widths must be >= 1".into()));
        }
        if !(self.coord_scale > 0.0) || self.input_scale.iter().any(|s| !(s.is_finite() && *s != 0.0)) {
            return Err(VortexError::Config("input_scale and coord_scale must be finite and non-zero".into()));
        }
        Ok(())
    }

    pub fn spatial_dim(&self) -> usize {
        *self.point_widths.last().unwrap()
    }

    /// Width of the per-point features fed to the soft-center head.
    pub fn point_feature_dim(&self) -> usize {
        self.point_widths[self.point_widths.len() - 2]
    }

    /// Width of `h_T`.
    pub fn embed_dim(&self) -> usize {
        match self.aggregator {
            Aggregator::Lstm => self.hidden,
            Aggregator::MeanPool => self.spatial_dim(),
        }
    }

    pub fn output_dim(&self) -> usize {
        *self.proj_widths.last().unwrap()
    }

    fn layer_shapes(&self) -> Vec<(String, usize, usize)> {
        let mut out = Vec::new();
        let mut push_mlp = |prefix: &str, widths: &[usize]| {
            for (k, w) in widths.windows(2).enumerate() {
                out.push((format!("{prefix}{k}"), w[0], w[1]));
            }
        };
        push_mlp(ENCODER, &self.point_widths);
        let e = self.embed_dim();
        let proj: Vec<usize> = std::iter::once(e).chain(self.proj_widths.iter().copied()).collect();
        push_mlp(PROJ, &proj);
        push_mlp(CENTER, &[self.point_feature_dim() + e, self.center_hidden, 2]);
        push_mlp(FORECAST, &[e, self.forecast_hidden, 8]);
        out
    }

    /// Every parameter name the model owns, sorted.
    pub fn parameter_names(&self) -> Vec<String> {
        let mut names: Vec<String> =
            self.layer_shapes().into_iter().flat_map(|(p, _, _)| [format!("{p}.weight"), format!("{p}.bias")]).collect();
        if self.aggregator == Aggregator::Lstm {
            names.extend(["w_ih", "w_hh", "bias"].map(|s| format!("{LSTM}{s}")));
        }
        names.sort();
        names
    }

    pub fn hyper_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

/// Xavier-uniform weights, zero biases, LSTM forget-gate bias 1. Each layer
/// draws from its own stream so adding a head never perturbs the others.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParameterStore> {
    cfg.validate()?;
    let mut store = ParameterStore::new();
    for (i, (prefix, fan_in, fan_out)) in cfg.layer_shapes().into_iter().enumerate() {
        let mut r = rng::stream(seed, &[rng::tag::INIT, i as u64]);
        store.insert(format!("{prefix}.weight"), xavier_uniform(fan_in, fan_out, &mut r));
        store.insert(format!("{prefix}.bias"), Tensor::zeros(&[1, fan_out]));
    }
    if cfg.aggregator == Aggregator::Lstm {
        let (d, h) = (cfg.spatial_dim(), cfg.hidden);
        let mut r = rng::stream(seed, &[rng::tag::INIT, 1000]);
        store.insert(format!("{LSTM}w_ih"), xavier_uniform(d, 4 * h, &mut r));
        store.insert(format!("{LSTM}w_hh"), xavier_uniform(h, 4 * h, &mut r));
        let mut bias = vec![0.0; 4 * h];
        bias[h..2 * h].iter_mut().for_each(|b| *b = 1.0);
        store.insert(format!("{LSTM}bias"), Tensor::new(vec![1, 4 * h], bias)?);
    }
    Ok(store)
}

/// Checkpoint carrying `cfg` as its hyperparameters.
pub fn checkpoint_for(cfg: &ModelConfig, params: &ParameterStore, step: u64, seed: u64) -> Checkpoint {
    Checkpoint { params: params.clone(), hyper: cfg.hyper_json(), step, seed }
}

pub fn config_from_checkpoint(ck: &Checkpoint) -> Result<ModelConfig> {
    let cfg: ModelConfig = serde_json::from_value(ck.hyper.clone())
        .map_err(|e| VortexError::Architecture(format!("checkpoint hyperparameters: {e}")))?;
    ck.verify_names(&cfg.parameter_names())?;
    for (name, t) in ck.params.iter() {
        if !t.is_finite() {
            return Err(VortexError::NonFinite(format!("checkpoint tensor `{name}`")));
        }
    }
    let fresh = init_params(&cfg, 0)?;
    for (name, t) in fresh.iter() {
        if ck.params.get(name)?.shape() != t.shape() {
            return Err(VortexError::Architecture(format!("shape of `{name}` disagrees with the recorded config")));
        }
    }
    Ok(cfg)
}

/// Loads parameters for `expected` from a checkpoint; any architecture
/// difference is an error.
pub fn load_matching(ck: &Checkpoint, expected: &ModelConfig) -> Result<ParameterStore> {
    let cfg = config_from_checkpoint(ck)?;
    if &cfg != expected {
        return Err(VortexError::Architecture("checkpoint was trained with a different model config".into()));
    }
    Ok(ck.params.clone())
}

/// Flattened view of a batch of sequences.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `[P, 3]` scaled network input.
    pub input: Tensor,
    /// `[P, 2]` unscaled `(y, z)`.
    pub coords: Tensor,
    /// Point rows of each frame.
    pub frame_points: Vec<Range<usize>>,
    /// Frame indices of each sequence.
    pub seq_frames: Vec<Range<usize>>,
}

impl Batch {
    pub fn new(seqs: &[&ScanSequence], cfg: &ModelConfig) -> Result<Self> {
        let mut input = Vec::new();
        let mut coords = Vec::new();
        let mut frame_points = Vec::new();
        let mut seq_frames = Vec::new();
        let mut p = 0;
        for s in seqs {
            if s.frames.is_empty() {
                return Err(VortexError::Empty(format!("sequence {} has no frames", s.event_id)));
            }
            let f0 = frame_points.len();
            for f in &s.frames {
                if f.points.is_empty() {
                    return Err(VortexError::Empty(format!("frame of {} has no points", s.event_id)));
                }
                for q in &f.points {
                    if !q.iter().all(|v| v.is_finite()) {
                        return Err(VortexError::NonFinite(format!("point in {}", s.event_id)));
                    }
                    input.extend((0..3).map(|k| q[k] * cfg.input_scale[k]));
                    coords.extend([q[0], q[1]]);
                }
                frame_points.push(p..p + f.points.len());
                p += f.points.len();
            }
            seq_frames.push(f0..frame_points.len());
        }
        Ok(Self { input: Tensor::new(vec![p, 3], input)?, coords: Tensor::new(vec![p, 2], coords)?, frame_points, seq_frames })
    }

    pub fn len(&self) -> usize {
        self.seq_frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seq_frames.is_empty()
    }

    /// Point rows of each sequence's last frame.
    pub fn final_frame_points(&self) -> Vec<Range<usize>> {
        self.seq_frames.iter().map(|r| self.frame_points[r.end - 1].clone()).collect()
    }
}

/// Graph handles for encoder outputs.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    /// `[P, point_feature_dim]` penultimate per-point activations.
    pub point_features: Var,
    /// `[F, D_s]` max-pooled frame features.
    pub frame_features: Var,
}

/// Parameters placed on a graph. Names for which `trainable` is false become
/// constants and receive no gradient.
pub struct Network<'c> {
    pub cfg: &'c ModelConfig,
    vars: BTreeMap<String, Var>,
}

impl<'c> Network<'c> {
    pub fn bind(g: &mut Graph, params: &ParameterStore, cfg: &'c ModelConfig, trainable: impl Fn(&str) -> bool) -> Self {
        let vars = params
            .iter()
            .map(|(name, t)| {
                let v = if trainable(name) { g.param(name, t.clone()) } else { g.constant(t.clone()) };
                (name.clone(), v)
            })
            .collect();
        Self { cfg, vars }
    }

    pub fn bind_frozen(g: &mut Graph, params: &ParameterStore, cfg: &'c ModelConfig) -> Self {
        Self::bind(g, params, cfg, |_| false)
    }

    fn var(&self, name: &str) -> Var {
        *self.vars.get(name).unwrap_or_else(|| panic!("parameter `{name}` is not bound"))
    }

    fn layer(&self, g: &mut Graph, prefix: &str, k: usize, x: Var) -> Var {
        let w = self.var(&format!("{prefix}{k}.weight"));
        let b = self.var(&format!("{prefix}{k}.bias"));
        g.linear(x, w, b)
    }

    /// Hidden layers use ReLU; the last layer is linear.
    fn mlp(&self, g: &mut Graph, prefix: &str, layers: usize, mut x: Var) -> Var {
        for k in 0..layers {
            x = self.layer(g, prefix, k, x);
            if k + 1 < layers {
                x = g.relu(x);
            }
        }
        x
    }

    pub fn encode(&self, g: &mut Graph, batch: &Batch) -> Encoded {
        let mut x = g.constant(batch.input.clone());
        let layers = self.cfg.point_widths.len() - 1;
        let mut penultimate = x;
        for k in 0..layers {
            if k + 1 == layers {
                penultimate = x;
            }
            x = self.layer(g, ENCODER, k, x);
            x = g.relu(x);
        }
        Encoded { point_features: penultimate, frame_features: g.segment_max(x, &batch.frame_points) }
    }

    /// `h_T` for every sequence of the batch, `[B, embed_dim]`.
    pub fn aggregate(&self, g: &mut Graph, frame_features: Var, batch: &Batch) -> Var {
        self.aggregate_frames(g, frame_features, &batch.seq_frames)
    }

    /// [`Network::aggregate`] over explicit frame ranges.
    pub fn aggregate_frames(&self, g: &mut Graph, frame_features: Var, seqs: &[Range<usize>]) -> Var {
        match self.cfg.aggregator {
            Aggregator::MeanPool => g.segment_mean(frame_features, seqs),
            Aggregator::Lstm => self.lstm(g, frame_features, seqs),
        }
    }

    /// Runs the LSTM over variable-length sequences. Finished sequences keep
    /// their state, so nothing past a sequence's own last frame is read.
    pub fn lstm(&self, g: &mut Graph, frame_features: Var, seqs: &[Range<usize>]) -> Var {
        let w = LstmWeights {
            w_ih: self.var(&format!("{LSTM}w_ih")),
            w_hh: self.var(&format!("{LSTM}w_hh")),
            bias: self.var(&format!("{LSTM}bias")),
        };
        let b = seqs.len();
        let h0 = Tensor::zeros(&[b, self.cfg.hidden]);
        let mut h = g.constant(h0.clone());
        let mut c = g.constant(h0);
        let steps = seqs.iter().map(|r| r.len()).max().unwrap_or(0);
        for t in 0..steps {
            let idx: Vec<usize> = seqs.iter().map(|r| r.start + t.min(r.len() - 1)).collect();
            let active: Vec<bool> = seqs.iter().map(|r| t < r.len()).collect();
            let x = g.gather_rows(frame_features, &idx);
            let (hn, cn) = lstm_cell(g, x, h, c, w);
            if active.iter().all(|a| *a) {
                (h, c) = (hn, cn);
            } else {
                h = g.select_rows(&active, hn, h);
                c = g.select_rows(&active, cn, c);
            }
        }
        h
    }

    /// Unit-norm contrastive embedding.
    pub fn project(&self, g: &mut Graph, h: Var) -> Var {
        let z = self.mlp(g, PROJ, self.cfg.proj_widths.len(), h);
        g.l2_normalize_rows(z, NORM_EPS)
    }

    /// Returns `(masks [R, 2], centers [B, 4])`. Masks cover the final frame of
    /// each sequence; centers are `(y_port, z_port, y_star, z_star)`.
    pub fn soft_center(&self, g: &mut Graph, enc: &Encoded, h: Var, batch: &Batch) -> (Var, Var) {
        let finals = batch.final_frame_points();
        let idx: Vec<usize> = finals.iter().flat_map(|r| r.clone()).collect();
        let mut segs = Vec::with_capacity(finals.len());
        let mut start = 0;
        for r in &finals {
            segs.push(start..start + r.len());
            start += r.len();
        }
        let feats = g.gather_rows(enc.point_features, &idx);
        let coords = Tensor::new(vec![idx.len(), 2], idx.iter().flat_map(|&i| batch.coords.row_slice(i).to_vec()).collect())
            .expect("coordinate rows");
        self.soft_center_rows(g, feats, coords, &segs, h)
    }

    /// Soft center over final-frame rows already gathered: `feats` and
    /// `coords` hold the points of sequence `i` in rows `segs[i]`.
    pub fn soft_center_rows(&self, g: &mut Graph, feats: Var, coords: Tensor, segs: &[Range<usize>], h: Var) -> (Var, Var) {
        let ctx = g.broadcast_segments(h, segs);
        let x = g.concat_cols(&[feats, ctx]);
        let logits = self.mlp(g, CENTER, 2, x);
        let masks = g.sigmoid(logits);
        let p = g.constant(coords);
        let centers = g.weighted_centroid(masks, p, segs, CENTER_EPS);
        (masks, centers)
    }

    /// `[B, 8]`: `(y,z)` port then starboard at `t+1`, then the same at `t+2`,
    /// in the sequence's centered frame.
    pub fn forecast(&self, g: &mut Graph, h: Var) -> Var {
        let out = self.mlp(g, FORECAST, 2, h);
        g.scale(out, self.cfg.coord_scale)
    }
}

/// Encoder outputs of one sequence, for training on top of a fixed encoder.
#[derive(Clone, Debug)]
pub struct FrozenFeatures {
    /// `[T, D_s]` max-pooled frame features.
    pub frames: Tensor,
    /// `[N, point_feature_dim]` penultimate activations of the final frame.
    pub final_points: Tensor,
    /// `[N, 2]` `(y, z)` of the final frame.
    pub final_coords: Tensor,
}

fn rows_of(t: &Tensor, r: Range<usize>) -> Result<Tensor> {
    let c = t.cols();
    Ok(Tensor::new(vec![r.len(), c], t.data()[r.start * c..r.end * c].to_vec())?)
}

pub fn frozen_features(
    params: &ParameterStore,
    cfg: &ModelConfig,
    seqs: &[&ScanSequence],
    chunk: usize,
) -> Result<Vec<FrozenFeatures>> {
    let mut out = Vec::with_capacity(seqs.len());
    for part in seqs.chunks(chunk.max(1)) {
        let batch = Batch::new(part, cfg)?;
        let mut g = Graph::new();
        let net = Network::bind_frozen(&mut g, params, cfg);
        let enc = net.encode(&mut g, &batch);
        let frames = g.value(enc.frame_features);
        let points = g.value(enc.point_features);
        for (sf, fp) in batch.seq_frames.iter().zip(batch.final_frame_points()) {
            out.push(FrozenFeatures {
                frames: rows_of(frames, sf.clone())?,
                final_points: rows_of(points, fp.clone())?,
                final_coords: rows_of(&batch.coords, fp)?,
            });
        }
    }
    Ok(out)
}

/// Stacks cached features of a batch: frame rows with their per-sequence
/// ranges, and final-frame point rows, coordinates and ranges.
pub fn stack_frozen(items: &[&FrozenFeatures]) -> Result<(Tensor, Vec<Range<usize>>, Tensor, Tensor, Vec<Range<usize>>)> {
    let stack = |ts: Vec<&Tensor>| -> Result<(Tensor, Vec<Range<usize>>)> {
        let c = ts[0].cols();
        let mut data = Vec::new();
        let mut ranges = Vec::with_capacity(ts.len());
        let mut r = 0;
        for t in ts {
            data.extend_from_slice(t.data());
            ranges.push(r..r + t.rows());
            r += t.rows();
        }
        Ok((Tensor::new(vec![r, c], data)?, ranges))
    };
    if items.is_empty() {
        return Err(VortexError::Empty("no sequences to stack".into()));
    }
    let (frames, seq_frames) = stack(items.iter().map(|f| &f.frames).collect())?;
    let (points, segs) = stack(items.iter().map(|f| &f.final_points).collect())?;
    let (coords, _) = stack(items.iter().map(|f| &f.final_coords).collect())?;
    Ok((frames, seq_frames, points, coords, segs))
}

/// Forward pass without gradients; returns `h_T` rows for each sequence.
pub fn embed_sequences(
    params: &ParameterStore,
    cfg: &ModelConfig,
    seqs: &[&ScanSequence],
    chunk: usize,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(seqs.len());
    for part in seqs.chunks(chunk.max(1)) {
        let batch = Batch::new(part, cfg)?;
        let mut g = Graph::new();
        let net = Network::bind_frozen(&mut g, params, cfg);
        let enc = net.encode(&mut g, &batch);
        let h = net.aggregate(&mut g, enc.frame_features, &batch);
        let t = g.value(h);
        out.extend((0..t.rows()).map(|r| t.row_slice(r).to_vec()));
    }
    Ok(out)
}

/// Predicted centers `(port, starboard)` in each sequence's own frame.
pub fn predict_centers(
    params: &ParameterStore,
    cfg: &ModelConfig,
    seqs: &[&ScanSequence],
    chunk: usize,
) -> Result<Vec<[[f64; 2]; 2]>> {
    let mut out = Vec::with_capacity(seqs.len());
    for part in seqs.chunks(chunk.max(1)) {
        let batch = Batch::new(part, cfg)?;
        let mut g = Graph::new();
        let net = Network::bind_frozen(&mut g, params, cfg);
        let enc = net.encode(&mut g, &batch);
        let h = net.aggregate(&mut g, enc.frame_features, &batch);
        let (_, c) = net.soft_center(&mut g, &enc, h, &batch);
        let t = g.value(c);
        out.extend((0..t.rows()).map(|r| {
            let v = t.row_slice(r);
            [[v[0], v[1]], [v[2], v[3]]]
        }));
    }
    Ok(out)
}

/// Forecast rows `[t+1 pair, t+2 pair]` in each sequence's own frame.
pub fn predict_forecast(
    params: &ParameterStore,
    cfg: &ModelConfig,
    seqs: &[&ScanSequence],
    chunk: usize,
) -> Result<Vec<[[[f64; 2]; 2]; 2]>> {
    let mut out = Vec::with_capacity(seqs.len());
    for part in seqs.chunks(chunk.max(1)) {
        let batch = Batch::new(part, cfg)?;
        let mut g = Graph::new();
        let net = Network::bind_frozen(&mut g, params, cfg);
        let enc = net.encode(&mut g, &batch);
        let h = net.aggregate(&mut g, enc.frame_features, &batch);
        let f = net.forecast(&mut g, h);
        let t = g.value(f);
        out.extend((0..t.rows()).map(|r| forecast_row(t.row_slice(r))));
    }
    Ok(out)
}

pub fn forecast_row(v: &[f64]) -> [[[f64; 2]; 2]; 2] {
    [[[v[0], v[1]], [v[2], v[3]]], [[v[4], v[5]], [v[6], v[7]]]]
}
