//! Supervised training of the soft-center and forecast heads.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use vortexlab_tensor::{adam_step, cosine_lr, AdamConfig, AdamState, Graph, ParameterStore, Tensor, Var};

use crate::data::{center_sequence, CenterPair, ScanSequence};
use crate::error::{Result, VortexError};
use crate::model::{frozen_features, stack_frozen, Batch, ModelConfig, Network, CENTER, ENCODER, FORECAST};
use crate::rng::{self, tag};

pub const HISTORY: usize = 3;
pub const HORIZONS: usize = 2;
const FEATURE_CHUNK: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    /// Lower bound on optimizer steps; small label fractions get more epochs.
    pub min_steps: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 30, batch_size: 16, lr0: 1e-3, min_steps: 300, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || !(self.lr0 > 0.0) {
            return Err(VortexError::Config("epochs, batch_size and lr0 must be positive".into()));
        }
        Ok(())
    }

    fn schedule(&self, n: usize) -> (usize, usize) {
        let per_epoch = n.div_ceil(self.batch_size);
        let epochs = self.epochs.max(self.min_steps.div_ceil(per_epoch));
        (epochs, epochs * per_epoch)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ParameterStore,
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: u64,
}

/// Which parameters a fine-tuning run may change.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Trainable {
    /// Everything except the point encoder.
    FrozenEncoder,
    /// Only the task heads; encoder and aggregator stay fixed.
    HeadsOnly,
    All,
}

impl Trainable {
    pub fn freezes_encoder(self) -> bool {
        !self.allows(ENCODER)
    }

    pub fn allows(self, name: &str) -> bool {
        match self {
            Trainable::FrozenEncoder => !name.starts_with(ENCODER),
            Trainable::HeadsOnly => name.starts_with(CENTER) || name.starts_with(FORECAST),
            Trainable::All => true,
        }
    }
}

/// Minibatch Adam loop with cosine learning rate. `loss_fn` places the
/// parameters on the graph itself and returns the batch loss.
pub fn optimize(
    n: usize,
    mut params: ParameterStore,
    cfg: &TrainConfig,
    loss_fn: impl Fn(&mut Graph, &ParameterStore, &[usize]) -> Result<Var>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if n == 0 {
        return Err(VortexError::Empty("no training sequences".into()));
    }
    let (epochs, total) = cfg.schedule(n);
    let mut state = AdamState::default();
    let mut epoch_losses = Vec::with_capacity(epochs);
    let mut step = 0;
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::stream(cfg.seed, &[tag::SHUFFLE, epoch as u64]));
        let mut sum = 0.0;
        let mut count = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut g = Graph::new();
            let loss = loss_fn(&mut g, &params, chunk)?;
            let lv = g.value(loss).item();
            if !lv.is_finite() {
                return Err(VortexError::NonFinite(format!("training loss at epoch {}", epoch + 1)));
            }
            sum += lv;
            count += 1;
            let grads = g.param_grads(&g.backward(loss)?);
            let lr = cosine_lr(step, total, cfg.lr0)?;
            adam_step(&mut params, &grads, &mut state, lr, AdamConfig::default())?;
            step += 1;
        }
        epoch_losses.push(sum / count as f64);
    }
    Ok(TrainOutcome { params, epoch_losses, steps: state.step })
}

/// [`optimize`] over the X-VORTEX network.
pub fn fit(
    n: usize,
    model: &ModelConfig,
    params: ParameterStore,
    trainable: Trainable,
    cfg: &TrainConfig,
    loss_fn: impl Fn(&mut Graph, &Network, &[usize]) -> Result<Var>,
) -> Result<TrainOutcome> {
    model.validate()?;
    optimize(n, params, cfg, |g, p, idx| {
        let net = Network::bind(g, p, model, |name| trainable.allows(name));
        loss_fn(g, &net, idx)
    })
}

fn pair_row(c: &CenterPair) -> [f64; 4] {
    [c[0][0], c[0][1], c[1][0], c[1][1]]
}

/// Squared center error under the better of the two port/starboard
/// assignments, averaged over sequences and coordinates.
pub fn assignment_loss(g: &mut Graph, pred: Var, labels: &[CenterPair]) -> Var {
    let direct: Vec<[f64; 4]> = labels.iter().map(pair_row).collect();
    let swapped: Vec<[f64; 4]> = labels.iter().map(|c| pair_row(&[c[1], c[0]])).collect();
    let a = g.constant(Tensor::from_rows(&direct).expect("label rows"));
    let b = g.constant(Tensor::from_rows(&swapped).expect("label rows"));
    let da = g.sub(pred, a);
    let da = g.square(da);
    let da = g.sum_cols(da);
    let db = g.sub(pred, b);
    let db = g.square(db);
    let db = g.sum_cols(db);
    let m = g.minimum(da, db);
    let mean = g.mean(m);
    g.scale(mean, 0.25)
}

/// Final-frame centers of a labeled sequence, in its own frame.
pub fn final_centers(seq: &ScanSequence) -> Result<CenterPair> {
    seq.centers
        .as_ref()
        .and_then(|c| c.last().copied())
        .ok_or_else(|| VortexError::Data(format!("sequence {} has no center labels", seq.event_id)))
}

/// Trains the soft-center head (and, unless frozen, the encoder) on the
/// final-frame labels of `train`.
pub fn train_localizer(
    train: &[&ScanSequence],
    model: &ModelConfig,
    init: ParameterStore,
    trainable: Trainable,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let labels: Vec<CenterPair> = train.iter().map(|s| final_centers(s)).collect::<Result<_>>()?;
    if trainable.freezes_encoder() {
        let cache = frozen_features(&init, model, train, FEATURE_CHUNK)?;
        return fit(train.len(), model, init, trainable, cfg, |g, net, idx| {
            let items: Vec<_> = idx.iter().map(|&i| &cache[i]).collect();
            let (frames, seq_frames, points, coords, segs) = stack_frozen(&items)?;
            let f = g.constant(frames);
            let h = net.aggregate_frames(g, f, &seq_frames);
            let p = g.constant(points);
            let (_, centers) = net.soft_center_rows(g, p, coords, &segs, h);
            let y: Vec<CenterPair> = idx.iter().map(|&i| labels[i]).collect();
            Ok(assignment_loss(g, centers, &y))
        });
    }
    fit(train.len(), model, init, trainable, cfg, |g, net, idx| {
        let seqs: Vec<&ScanSequence> = idx.iter().map(|&i| train[i]).collect();
        let batch = Batch::new(&seqs, model)?;
        let enc = net.encode(g, &batch);
        let h = net.aggregate(g, enc.frame_features, &batch);
        let (_, centers) = net.soft_center(g, &enc, h, &batch);
        let y: Vec<CenterPair> = idx.iter().map(|&i| labels[i]).collect();
        Ok(assignment_loss(g, centers, &y))
    })
}

/// A forecasting example: the first three frames re-centered on their own
/// centroid, plus the next two center pairs in that frame.
#[derive(Clone, Debug, PartialEq)]
pub struct ForecastSample {
    pub history: ScanSequence,
    /// Center pairs at `t+1` and `t+2`, relative to the history's frame.
    pub targets: [CenterPair; HORIZONS],
    /// Observed centers over the history frames, in the same frame.
    pub history_centers: Vec<CenterPair>,
    pub timestamps: Vec<f64>,
}

impl ForecastSample {
    pub fn from_sequence(seq: &ScanSequence) -> Result<Self> {
        if seq.len() < HISTORY + HORIZONS {
            return Err(VortexError::Data(format!(
                "sequence {} has {} frames, forecasting needs {}",
                seq.event_id,
                seq.len(),
                HISTORY + HORIZONS
            )));
        }
        let abs =
            seq.absolute_centers().ok_or_else(|| VortexError::Data(format!("sequence {} has no center labels", seq.event_id)))?;
        let hist = seq.select_frames(&(0..HISTORY).collect::<Vec<_>>());
        let (history, _) = center_sequence(&hist)?;
        let o = history.centroid_removed;
        let shift = |c: &CenterPair| [[c[0][0] - o[0], c[0][1] - o[1]], [c[1][0] - o[0], c[1][1] - o[1]]];
        Ok(Self {
            targets: [shift(&abs[HISTORY]), shift(&abs[HISTORY + 1])],
            history_centers: abs[..HISTORY].iter().map(shift).collect(),
            timestamps: seq.frames.iter().map(|f| f.timestamp).collect(),
            history,
        })
    }

    /// Converts a prediction in the history frame to absolute coordinates.
    pub fn to_absolute(&self, c: &CenterPair) -> CenterPair {
        let o = self.history.centroid_removed;
        [[c[0][0] + o[0], c[0][1] + o[1]], [c[1][0] + o[0], c[1][1] + o[1]]]
    }
}

pub fn forecast_target_row(s: &ForecastSample) -> [f64; 8] {
    let a = pair_row(&s.targets[0]);
    let b = pair_row(&s.targets[1]);
    [a[0], a[1], a[2], a[3], b[0], b[1], b[2], b[3]]
}

/// Trains the forecast head (and aggregator, and optionally the encoder) with
/// MSE on both horizons.
pub fn train_forecaster(
    train: &[ForecastSample],
    model: &ModelConfig,
    init: ParameterStore,
    trainable: Trainable,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let target = |g: &mut Graph, idx: &[usize]| -> Result<Var> {
        let rows: Vec<[f64; 8]> = idx.iter().map(|&i| forecast_target_row(&train[i])).collect();
        Ok(g.constant(Tensor::from_rows(&rows)?))
    };
    if trainable.freezes_encoder() {
        let hist: Vec<&ScanSequence> = train.iter().map(|s| &s.history).collect();
        let cache = frozen_features(&init, model, &hist, FEATURE_CHUNK)?;
        return fit(train.len(), model, init, trainable, cfg, |g, net, idx| {
            let items: Vec<_> = idx.iter().map(|&i| &cache[i]).collect();
            let (frames, seq_frames, ..) = stack_frozen(&items)?;
            let f = g.constant(frames);
            let h = net.aggregate_frames(g, f, &seq_frames);
            let pred = net.forecast(g, h);
            let y = target(g, idx)?;
            Ok(vortexlab_tensor::nn::mse(g, pred, y))
        });
    }
    fit(train.len(), model, init, trainable, cfg, |g, net, idx| {
        let seqs: Vec<&ScanSequence> = idx.iter().map(|&i| &train[i].history).collect();
        let batch = Batch::new(&seqs, model)?;
        let enc = net.encode(g, &batch);
        let h = net.aggregate(g, enc.frame_features, &batch);
        let pred = net.forecast(g, h);
        let y = target(g, idx)?;
        Ok(vortexlab_tensor::nn::mse(g, pred, y))
    })
}
