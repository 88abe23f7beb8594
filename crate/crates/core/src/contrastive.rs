//! InfoNCE, embedding diagnostics and the pretraining loop.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use vortexlab_tensor::{adam_step, cosine_lr, AdamConfig, AdamState, Graph, ParameterStore, Tensor, Var};

use crate::augment::{keyed_view_pair, AugmentConfig, ViewPair};
use crate::data::ScanSequence;
use crate::error::{Result, VortexError};
use crate::io::MetricRecord;
use crate::model::{init_params, Batch, ModelConfig, Network};
use crate::rng::{self, tag};
use rand::seq::SliceRandom;

const UNIT_TOL: f64 = 1e-4;

/// InfoNCE over `2B` rows where row `i` and row `i + B` are positives.
/// Self-similarity is excluded from every denominator.
pub fn info_nce_loss(g: &mut Graph, z: Var, temperature: f64) -> Result<Var> {
    let n = g.value(z).rows();
    if n == 0 || n % 2 != 0 {
        return Err(VortexError::Empty(format!("info_nce needs 2B rows with B >= 1, got {n}")));
    }
    if !(temperature > 0.0) {
        return Err(VortexError::Config("temperature must be > 0".into()));
    }
    check_unit_rows(g.value(z))?;
    let b = n / 2;
    let sim = g.matmul_nt(z, z);
    let logits = g.scale(sim, 1.0 / temperature);
    let selves: Vec<usize> = (0..n).collect();
    let partners: Vec<usize> = (0..n).map(|i| (i + b) % n).collect();
    let lse = g.logsumexp_rows(logits, Some(&selves));
    let pos = g.pick(logits, &partners);
    let nll = g.sub(lse, pos);
    Ok(g.mean(nll))
}

pub fn info_nce(z: &Tensor, temperature: f64) -> Result<f64> {
    let mut g = Graph::new();
    let v = g.constant(z.clone());
    let l = info_nce_loss(&mut g, v, temperature)?;
    Ok(g.value(l).item())
}

fn check_unit_rows(z: &Tensor) -> Result<()> {
    for r in 0..z.rows() {
        let n = z.row_slice(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        if (n - 1.0).abs() > UNIT_TOL {
            return Err(VortexError::Data(format!("row {r} has norm {n}, expected unit rows")));
        }
    }
    Ok(())
}

fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Mean of `‖a_i − b_i‖²` over paired rows.
pub fn alignment(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.rows() == 0 || a.shape() != b.shape() {
        return Err(VortexError::Empty("alignment needs at least one pair of equal-shaped rows".into()));
    }
    let s: f64 = (0..a.rows()).map(|i| dist_sq(a.row_slice(i), b.row_slice(i))).sum();
    Ok(s / a.rows() as f64)
}

/// `log` of the mean of `exp(−2‖z_i − z_j‖²)` over distinct unordered pairs.
pub fn uniformity(z: &Tensor) -> Result<f64> {
    let n = z.rows();
    if n < 2 {
        return Err(VortexError::Empty("uniformity needs at least two embeddings".into()));
    }
    let mut s = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            s += (-2.0 * dist_sq(z.row_slice(i), z.row_slice(j))).exp();
        }
    }
    Ok((s / (n * (n - 1) / 2) as f64).ln())
}

fn split_halves(z: &Tensor) -> (Tensor, Tensor) {
    let (n, d) = (z.rows(), z.cols());
    let b = n / 2;
    let top = Tensor::new(vec![b, d], z.data()[..b * d].to_vec()).unwrap();
    let bottom = Tensor::new(vec![b, d], z.data()[b * d..].to_vec()).unwrap();
    (top, bottom)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub temperature: f64,
    pub lr0: f64,
    /// Epochs without a validation improvement before stopping.
    pub patience: usize,
    pub augment: AugmentConfig,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 16,
            temperature: 0.07,
            lr0: 1e-3,
            patience: 10,
            augment: AugmentConfig::default(),
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(VortexError::Config("epochs must be >= 1".into()));
        }
        if self.batch_size < 2 {
            return Err(VortexError::Config("batch_size must be >= 2".into()));
        }
        if !(self.temperature > 0.0) || !(self.lr0 > 0.0) {
            return Err(VortexError::Config("temperature and lr0 must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    /// Parameters from the epoch with the lowest validation loss (the last
    /// epoch when there is no validation set).
    pub params: ParameterStore,
    pub metrics: Vec<MetricRecord>,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub steps: u64,
}

#[derive(Default)]
struct Running {
    loss: f64,
    alignment: f64,
    uniformity: f64,
    batches: usize,
}

impl Running {
    fn add(&mut self, loss: f64, z: &Tensor) -> Result<()> {
        let (a, b) = split_halves(z);
        self.loss += loss;
        self.alignment += alignment(&a, &b)?;
        self.uniformity += uniformity(z)?;
        self.batches += 1;
        Ok(())
    }

    fn record(&self, epoch: usize, split: &str, lr: f64) -> MetricRecord {
        let n = self.batches.max(1) as f64;
        MetricRecord {
            epoch,
            split: split.to_string(),
            loss: self.loss / n,
            alignment: self.alignment / n,
            uniformity: self.uniformity / n,
            lr,
        }
    }
}

fn stack_views(pairs: &[ViewPair]) -> Vec<&ScanSequence> {
    pairs.iter().map(|p| &p.view_weak).chain(pairs.iter().map(|p| &p.view_strong)).collect()
}

/// Forward pass for a batch of view pairs. Returns the loss node and the
/// projected embeddings.
pub fn contrastive_forward(g: &mut Graph, net: &Network, pairs: &[ViewPair], temperature: f64) -> Result<(Var, Var)> {
    let views = stack_views(pairs);
    let batch = Batch::new(&views, net.cfg)?;
    let enc = net.encode(g, &batch);
    let h = net.aggregate(g, enc.frame_features, &batch);
    let z = net.project(g, h);
    let loss = info_nce_loss(g, z, temperature)?;
    Ok((loss, z))
}

fn batches(n: usize, b: usize) -> usize {
    n / b + usize::from(n % b >= 2)
}

fn make_pairs(
    seqs: &[&ScanSequence],
    idx: &[usize],
    seed: u64,
    stream: u64,
    epoch: u64,
    cfg: &AugmentConfig,
) -> Result<Vec<ViewPair>> {
    idx.par_iter().map(|&i| keyed_view_pair(seqs[i], seed, stream, epoch, i as u64, cfg)).collect()
}

fn evaluate(params: &ParameterStore, model: &ModelConfig, val: &[&ScanSequence], cfg: &PretrainConfig) -> Result<Running> {
    let mut run = Running::default();
    let idx: Vec<usize> = (0..val.len()).collect();
    for chunk in idx.chunks(cfg.batch_size).filter(|c| c.len() >= 2) {
        let pairs = make_pairs(val, chunk, cfg.seed, tag::VAL_AUGMENT, 0, &cfg.augment)?;
        let mut g = Graph::new();
        let net = Network::bind_frozen(&mut g, params, model);
        let (loss, z) = contrastive_forward(&mut g, &net, &pairs, cfg.temperature)?;
        run.add(g.value(loss).item(), g.value(z))?;
    }
    Ok(run)
}

/// Self-supervised pretraining. Parameters start from `init` or, if absent,
/// a fresh initialization keyed by `cfg.seed`.
pub fn pretrain(
    train: &[&ScanSequence],
    val: &[&ScanSequence],
    model: &ModelConfig,
    cfg: &PretrainConfig,
    init: Option<ParameterStore>,
    mut on_epoch: impl FnMut(&[MetricRecord]),
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    model.validate()?;
    if train.len() < 2 {
        return Err(VortexError::Empty(format!("pretraining needs at least 2 sequences, got {}", train.len())));
    }
    let t = train.iter().map(|s| s.len()).min().unwrap_or(0);
    cfg.augment.validate(t)?;
    let mut params = match init {
        Some(p) => p,
        None => init_params(model, cfg.seed)?,
    };
    let mut state = AdamState::default();
    let per_epoch = batches(train.len(), cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let mut metrics = Vec::new();
    let mut best: Option<(f64, usize, ParameterStore)> = None;
    let mut since_best = 0;
    let mut epochs_run = 0;
    let mut step = 0usize;
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng::stream(cfg.seed, &[tag::SHUFFLE, epoch as u64]));
        let mut run = Running::default();
        let mut lr = cfg.lr0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let pairs = make_pairs(train, chunk, cfg.seed, tag::AUGMENT, epoch as u64, &cfg.augment)?;
            let mut g = Graph::new();
            let net = Network::bind(&mut g, &params, model, |_| true);
            let (loss, z) = contrastive_forward(&mut g, &net, &pairs, cfg.temperature)?;
            let lv = g.value(loss).item();
            if !lv.is_finite() {
                return Err(VortexError::NonFinite(format!("training loss at epoch {epoch}, batch {bi}")));
            }
            run.add(lv, g.value(z))?;
            let grads = g.param_grads(&g.backward(loss)?);
            if let Some((name, _)) = grads.iter().find(|(_, t)| !t.is_finite()) {
                return Err(VortexError::NonFinite(format!("gradient of `{name}` at epoch {epoch}, batch {bi}")));
            }
            lr = cosine_lr(step, total, cfg.lr0)?;
            adam_step(&mut params, &grads, &mut state, lr, AdamConfig::default())?;
            step += 1;
        }
        metrics.push(run.record(epoch, "train", lr));
        epochs_run = epoch;
        if val.len() >= 2 {
            let v = evaluate(&params, model, val, cfg)?;
            let rec = v.record(epoch, "val", lr);
            if !rec.loss.is_finite() {
                return Err(VortexError::NonFinite(format!("validation loss at epoch {epoch}")));
            }
            let improved = best.as_ref().map_or(true, |(b, _, _)| rec.loss < *b);
            if improved {
                best = Some((rec.loss, epoch, params.clone()));
                since_best = 0;
            } else {
                since_best += 1;
            }
            metrics.push(rec);
            on_epoch(&metrics);
            if since_best >= cfg.patience {
                break;
            }
        } else {
            on_epoch(&metrics);
        }
    }
    let (params, best_epoch) = match best {
        Some((_, e, p)) => (p, e),
        None => (params, epochs_run),
    };
    Ok(PretrainOutcome { params, metrics, best_epoch, epochs_run, steps: state.step })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn unit_rows(n: usize, d: usize, r: &mut ChaCha8Rng) -> Tensor {
        let mut data: Vec<f64> = (0..n * d).map(|_| r.sample(StandardNormal)).collect();
        for row in data.chunks_mut(d) {
            let s = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.iter_mut().for_each(|v| *v /= s);
        }
        Tensor::new(vec![n, d], data).unwrap()
    }

    #[test]
    fn single_pair_has_zero_loss() {
        let z = Tensor::from_rows(&[[0.6, 0.8], [1.0, 0.0]]).unwrap();
        assert_eq!(info_nce(&z, 0.07).unwrap(), 0.0);
    }

    #[test]
    fn orthogonal_negatives_closed_form() {
        let z = Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [0.0, 1.0]]).unwrap();
        let tau = 0.07;
        let expect = (1.0 + 2.0 * (-1.0f64 / tau).exp()).ln();
        let got = info_nce(&z, tau).unwrap();
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    }

    #[test]
    fn errors() {
        assert!(info_nce(&Tensor::from_rows(&[[2.0, 0.0], [1.0, 0.0]]).unwrap(), 0.07).is_err());
        assert!(info_nce(&Tensor::zeros(&[0, 3]), 0.07).is_err());
        assert!(alignment(&Tensor::zeros(&[0, 3]), &Tensor::zeros(&[0, 3])).is_err());
        assert!(uniformity(&Tensor::row(&[1.0, 0.0])).is_err());
    }

    #[test]
    fn uniformity_examples() {
        let same = Tensor::from_rows(&[[0.0, 1.0], [0.0, 1.0], [0.0, 1.0]]).unwrap();
        assert_eq!(uniformity(&same).unwrap(), 0.0);
        let anti = Tensor::from_rows(&[[1.0, 0.0], [-1.0, 0.0]]).unwrap();
        assert!((uniformity(&anti).unwrap() + 8.0).abs() < 1e-12);
    }

    #[test]
    fn alignment_examples() {
        let a = Tensor::from_rows(&[[3.0, 0.0], [1.0, 1.0]]).unwrap();
        let b = Tensor::from_rows(&[[0.0, 4.0], [1.0, 1.0]]).unwrap();
        assert_eq!(alignment(&a, &b).unwrap(), 12.5);
        assert_eq!(alignment(&b, &b).unwrap(), 0.0);
    }

    #[test]
    fn uniformity_and_alignment_signs() {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let z = unit_rows(10, 4, &mut r);
            assert!(uniformity(&z).unwrap() <= 0.0);
            let (a, b) = split_halves(&z);
            assert!(alignment(&a, &b).unwrap() >= 0.0);
        }
    }
}
