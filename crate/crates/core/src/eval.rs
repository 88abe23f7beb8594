//! Metrics and linear probing.

use serde::{Deserialize, Serialize};
use vortexlab_tensor::{adam_step, AdamConfig, AdamState, Graph, ParameterStore, Tensor};

use crate::data::CenterPair;
use crate::error::{Result, VortexError};
use crate::rng::{self, tag};

fn d2(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

/// Squared errors of the two centers under the assignment with the smaller
/// summed distance. Ties keep the given order.
pub fn assigned_sq_errors(pred: &CenterPair, label: &CenterPair) -> [f64; 2] {
    let direct = [d2(pred[0], label[0]), d2(pred[1], label[1])];
    let swapped = [d2(pred[1], label[0]), d2(pred[0], label[1])];
    let cost = |e: &[f64; 2]| e[0].sqrt() + e[1].sqrt();
    if cost(&swapped) < cost(&direct) {
        swapped
    } else {
        direct
    }
}

/// Root mean squared center distance in metres, with best-of-two matching.
pub fn rmse_centers(preds: &[CenterPair], labels: &[CenterPair]) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(VortexError::Data(format!("{} predictions for {} labels", preds.len(), labels.len())));
    }
    if preds.is_empty() {
        return Err(VortexError::Empty("rmse over zero frames".into()));
    }
    let total: f64 = preds.iter().zip(labels).map(|(p, l)| assigned_sq_errors(p, l).iter().sum::<f64>()).sum();
    Ok((total / (2 * preds.len()) as f64).sqrt())
}

/// RMSE at `t+1` and `t+2` for predictions and labels in absolute coordinates.
pub fn forecast_rmse(preds: &[[CenterPair; 2]], labels: &[[CenterPair; 2]]) -> Result<[f64; 2]> {
    if preds.len() != labels.len() {
        return Err(VortexError::Data("forecast prediction and label counts differ".into()));
    }
    let h = |k: usize| -> Result<f64> {
        let p: Vec<CenterPair> = preds.iter().map(|x| x[k]).collect();
        let l: Vec<CenterPair> = labels.iter().map(|x| x[k]).collect();
        rmse_centers(&p, &l)
    };
    Ok([h(0)?, h(1)?])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { epochs: 300, lr: 0.01, seed: 0 }
    }
}

fn standardizer(x: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let d = x[0].len();
    let n = x.len() as f64;
    let mut mean = vec![0.0; d];
    for row in x {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v / n;
        }
    }
    let mut sd = vec![0.0; d];
    for row in x {
        for k in 0..d {
            sd[k] += (row[k] - mean[k]).powi(2) / n;
        }
    }
    let sd = sd.into_iter().map(|v| if v.sqrt() > 1e-8 { v.sqrt() } else { 1.0 }).collect();
    (mean, sd)
}

fn apply(x: &[Vec<f64>], mean: &[f64], sd: &[f64]) -> Result<Tensor> {
    let d = mean.len();
    let data = x.iter().flat_map(|r| (0..d).map(move |k| (r[k] - mean[k]) / sd[k])).collect();
    Ok(Tensor::new(vec![x.len(), d], data)?)
}

/// Multinomial logistic regression on fixed features: standardization from
/// the training rows, one affine layer, softmax cross-entropy, full-batch
/// Adam. Returns top-1 accuracy on the test rows in percent.
pub fn linear_probe(
    train_x: &[Vec<f64>],
    train_y: &[usize],
    test_x: &[Vec<f64>],
    test_y: &[usize],
    n_classes: usize,
    cfg: &ProbeConfig,
) -> Result<f64> {
    if train_x.is_empty() || test_x.is_empty() || train_x.len() != train_y.len() || test_x.len() != test_y.len() {
        return Err(VortexError::Empty("probe needs non-empty, matching features and labels".into()));
    }
    let mut seen: Vec<usize> = train_y.to_vec();
    seen.sort_unstable();
    seen.dedup();
    if seen.len() < 2 {
        return Err(VortexError::Data("probe training labels contain a single class".into()));
    }
    if train_y.iter().chain(test_y).any(|&c| c >= n_classes) {
        return Err(VortexError::Data("class id out of range".into()));
    }
    let d = train_x[0].len();
    let (mean, sd) = standardizer(train_x);
    let xtr = apply(train_x, &mean, &sd)?;
    let xte = apply(test_x, &mean, &sd)?;
    let mut params = ParameterStore::new();
    let mut r = rng::stream(cfg.seed, &[tag::PROBE]);
    let bound = 1.0 / (d as f64).sqrt();
    params.insert(
        "probe.weight",
        Tensor::new(vec![d, n_classes], (0..d * n_classes).map(|_| rand::Rng::gen_range(&mut r, -bound..bound)).collect())?,
    );
    params.insert("probe.bias", Tensor::zeros(&[1, n_classes]));
    let mut state = AdamState::default();
    for _ in 0..cfg.epochs {
        let mut g = Graph::new();
        let w = g.param("probe.weight", params.get("probe.weight")?.clone());
        let b = g.param("probe.bias", params.get("probe.bias")?.clone());
        let x = g.constant(xtr.clone());
        let logits = g.linear(x, w, b);
        let lse = g.logsumexp_rows(logits, None);
        let tgt = g.pick(logits, train_y);
        let nll = g.sub(lse, tgt);
        let loss = g.mean(nll);
        let grads = g.param_grads(&g.backward(loss)?);
        adam_step(&mut params, &grads, &mut state, cfg.lr, AdamConfig::default())?;
    }
    let w = params.get("probe.weight")?;
    let b = params.get("probe.bias")?;
    let mut correct = 0;
    for (i, &y) in test_y.iter().enumerate() {
        let row = xte.row_slice(i);
        let scores: Vec<f64> = (0..n_classes).map(|c| b.get(0, c) + (0..d).map(|k| row[k] * w.get(k, c)).sum::<f64>()).collect();
        let best = (0..n_classes).max_by(|&a, &c| scores[a].total_cmp(&scores[c]).then(c.cmp(&a))).unwrap();
        correct += usize::from(best == y);
    }
    Ok(100.0 * correct as f64 / test_y.len() as f64)
}

/// Median of a non-empty slice (mean of the middle pair for even lengths).
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
