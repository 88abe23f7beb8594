//! Comparison methods: clustering and intensity heuristics for localization,
//! kinematic extrapolation and a trajectory-only LSTM for forecasting.

use serde::{Deserialize, Serialize};
use vortexlab_tensor::init::xavier_uniform;
use vortexlab_tensor::nn::{lstm_cell, mse, LstmWeights};
use vortexlab_tensor::{Graph, ParameterStore, Tensor, Var};

use crate::data::{Center, CenterPair, PointCloudFrame};
use crate::error::{Result, VortexError};
use crate::finetune::{optimize, TrainConfig, TrainOutcome};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DbscanConfig {
    pub eps: f64,
    pub min_pts: usize,
    /// Points with `|v_r|` below this are discarded before clustering.
    pub velocity_threshold: f64,
}

impl Default for DbscanConfig {
    fn default() -> Self {
        Self { eps: 8.0, min_pts: 10, velocity_threshold: 1.5 }
    }
}

fn sort_port_first(mut a: Center, mut b: Center) -> CenterPair {
    if b[0] > a[0] {
        std::mem::swap(&mut a, &mut b);
    }
    [a, b]
}

fn mean_of(points: &[[f64; 2]]) -> Center {
    let n = points.len() as f64;
    let (sy, sz) = points.iter().fold((0.0, 0.0), |(a, b), p| (a + p[0], b + p[1]));
    [sy / n, sz / n]
}

/// Cluster label per point (`None` for noise).
///
/// Core points are grouped by connected components, so membership does not
/// depend on input order. A border point joins the cluster of its nearest
/// core point, ties broken by the core point's coordinates.
pub fn dbscan(points: &[[f64; 2]], eps: f64, min_pts: usize) -> Vec<Option<usize>> {
    let n = points.len();
    let eps2 = eps * eps;
    let d2 = |i: usize, j: usize| {
        let (a, b) = (points[i], points[j]);
        (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
    };
    let neighbors: Vec<Vec<usize>> = (0..n).map(|i| (0..n).filter(|&j| d2(i, j) <= eps2).collect()).collect();
    let core: Vec<bool> = neighbors.iter().map(|nb| nb.len() >= min_pts).collect();
    let mut label: Vec<Option<usize>> = vec![None; n];
    let mut next = 0;
    for s in 0..n {
        if !core[s] || label[s].is_some() {
            continue;
        }
        label[s] = Some(next);
        let mut stack = vec![s];
        while let Some(i) = stack.pop() {
            for &j in &neighbors[i] {
                if core[j] && label[j].is_none() {
                    label[j] = Some(next);
                    stack.push(j);
                }
            }
        }
        next += 1;
    }
    for i in (0..n).filter(|&i| !core[i]) {
        label[i] = neighbors[i]
            .iter()
            .filter(|&&j| core[j])
            .min_by(|&&a, &&b| {
                d2(i, a)
                    .total_cmp(&d2(i, b))
                    .then(points[a][0].total_cmp(&points[b][0]))
                    .then(points[a][1].total_cmp(&points[b][1]))
            })
            .and_then(|&j| label[j]);
    }
    label
}

/// Centroids of the two largest clusters of strong returns, port first.
pub fn dbscan_centers(frame: &PointCloudFrame, cfg: &DbscanConfig) -> CenterPair {
    let fallback = frame.centroid();
    let strong: Vec<[f64; 2]> =
        frame.points.iter().filter(|p| p[2].abs() >= cfg.velocity_threshold).map(|p| [p[0], p[1]]).collect();
    let labels = dbscan(&strong, cfg.eps, cfg.min_pts);
    let k = labels.iter().flatten().max().map_or(0, |m| m + 1);
    let mut clusters: Vec<Vec<[f64; 2]>> = vec![Vec::new(); k];
    for (p, l) in strong.iter().zip(&labels) {
        if let Some(l) = l {
            clusters[*l].push(*p);
        }
    }
    let mut stats: Vec<(usize, Center)> = clusters.iter().map(|c| (c.len(), mean_of(c))).collect();
    stats.sort_by(|a, b| b.0.cmp(&a.0).then(b.1[0].total_cmp(&a.1[0])).then(b.1[1].total_cmp(&a.1[1])));
    match stats.as_slice() {
        [] => [fallback, fallback],
        [one] => [one.1, one.1],
        [a, b, ..] => sort_port_first(a.1, b.1),
    }
}

fn weighted_mean(points: &[(f64, f64, f64)]) -> Option<Center> {
    if points.is_empty() {
        return None;
    }
    let w: f64 = points.iter().map(|p| p.2).sum();
    if w > 0.0 {
        let y = points.iter().map(|p| p.2 * p.0).sum::<f64>() / w;
        let z = points.iter().map(|p| p.2 * p.1).sum::<f64>() / w;
        Some([y, z])
    } else {
        let pts: Vec<[f64; 2]> = points.iter().map(|p| [p.0, p.1]).collect();
        Some(mean_of(&pts))
    }
}

/// Splits the frame at the `|v_r|`-weighted median of `y` and returns the
/// `|v_r|`-weighted centroid of each side, port first.
pub fn intensity_centroid(frame: &PointCloudFrame) -> CenterPair {
    let mut pts: Vec<(f64, f64, f64)> = frame.points.iter().map(|p| (p[0], p[1], p[2].abs())).collect();
    if pts.is_empty() {
        let c = frame.centroid();
        return [c, c];
    }
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = pts.iter().map(|p| p.2).sum();
    let median = if total > 0.0 {
        let mut acc = 0.0;
        let mut m = pts[pts.len() - 1].0;
        for p in &pts {
            acc += p.2;
            if acc >= 0.5 * total {
                m = p.0;
                break;
            }
        }
        m
    } else {
        pts[(pts.len() - 1) / 2].0
    };
    let (low, high): (Vec<_>, Vec<_>) = pts.iter().partition(|p| p.0 <= median);
    let lo = weighted_mean(&low);
    let hi = weighted_mean(&high);
    match (lo, hi) {
        (Some(a), Some(b)) => sort_port_first(a, b),
        (Some(a), None) | (None, Some(a)) => [a, a],
        (None, None) => unreachable!("non-empty frame"),
    }
}

/// Linear extrapolation from the last two observations, assuming uniform
/// spacing. Returns the pairs at `t+1` and `t+2`.
pub fn constant_velocity_forecast(history: &[CenterPair]) -> Result<[CenterPair; 2]> {
    if history.len() < 2 {
        return Err(VortexError::Data("constant-velocity forecast needs two observations".into()));
    }
    let last = history[history.len() - 1];
    let prev = history[history.len() - 2];
    let at = |k: f64| {
        let mut out = last;
        for v in 0..2 {
            for d in 0..2 {
                out[v][d] = last[v][d] + k * (last[v][d] - prev[v][d]);
            }
        }
        out
    };
    Ok([at(1.0), at(2.0)])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KalmanConfig {
    /// White-acceleration spectral density, m²/s³.
    pub q: f64,
    /// Measurement noise variance, m².
    pub r: f64,
    /// Prior velocity variance, (m/s)².
    pub velocity_prior_var: f64,
}

impl Default for KalmanConfig {
    fn default() -> Self {
        Self { q: 0.5, r: 4.0, velocity_prior_var: 100.0 }
    }
}

impl KalmanConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.q > 0.0 && self.r > 0.0 && self.velocity_prior_var > 0.0) {
            return Err(VortexError::Config("Kalman q, r and velocity prior must be > 0".into()));
        }
        Ok(())
    }
}

type M4 = [[f64; 4]; 4];

fn mat_mul(a: &M4, b: &M4) -> M4 {
    let mut c = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            c[i][j] = (0..4).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

fn transpose(a: &M4) -> M4 {
    let mut t = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            t[i][j] = a[j][i];
        }
    }
    t
}

fn symmetrize(p: &mut M4) {
    for i in 0..4 {
        for j in i + 1..4 {
            let m = 0.5 * (p[i][j] + p[j][i]);
            p[i][j] = m;
            p[j][i] = m;
        }
    }
}

fn is_positive_definite(p: &M4) -> bool {
    let mut l = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                let d = p[i][i] - s;
                if !(d > 0.0) {
                    return false;
                }
                l[i][i] = d.sqrt();
            } else {
                l[i][j] = (p[i][j] - s) / l[j][j];
            }
        }
    }
    true
}

/// Constant-velocity Kalman filter over state `(y, z, v_y, v_z)`.
#[derive(Clone, Debug, PartialEq)]
pub struct KalmanFilter {
    pub x: [f64; 4],
    pub p: M4,
    pub cfg: KalmanConfig,
    /// Set when the covariance lost positive definiteness and was reset.
    pub reset_count: usize,
}

impl KalmanFilter {
    pub fn new(first: Center, cfg: KalmanConfig) -> Self {
        Self { x: [first[0], first[1], 0.0, 0.0], p: Self::prior(&cfg), cfg, reset_count: 0 }
    }

    fn prior(cfg: &KalmanConfig) -> M4 {
        let mut p = [[0.0; 4]; 4];
        p[0][0] = cfg.r;
        p[1][1] = cfg.r;
        p[2][2] = cfg.velocity_prior_var;
        p[3][3] = cfg.velocity_prior_var;
        p
    }

    fn guard(&mut self) {
        symmetrize(&mut self.p);
        if !is_positive_definite(&self.p) {
            self.p = Self::prior(&self.cfg);
            self.reset_count += 1;
        }
    }

    pub fn predict(&mut self, dt: f64) {
        let mut f = [[0.0; 4]; 4];
        for (i, row) in f.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        f[0][2] = dt;
        f[1][3] = dt;
        self.x = [self.x[0] + dt * self.x[2], self.x[1] + dt * self.x[3], self.x[2], self.x[3]];
        let q = self.cfg.q;
        let (a, b, c) = (q * dt.powi(3) / 3.0, q * dt.powi(2) / 2.0, q * dt);
        let mut p = mat_mul(&mat_mul(&f, &self.p), &transpose(&f));
        p[0][0] += a;
        p[1][1] += a;
        p[0][2] += b;
        p[2][0] += b;
        p[1][3] += b;
        p[3][1] += b;
        p[2][2] += c;
        p[3][3] += c;
        self.p = p;
        self.guard();
    }

    /// Measurement update with `H = [I 0]`, Joseph form.
    pub fn update(&mut self, z: Center) {
        let r = self.cfg.r;
        let s = [[self.p[0][0] + r, self.p[0][1]], [self.p[1][0], self.p[1][1] + r]];
        let det = s[0][0] * s[1][1] - s[0][1] * s[1][0];
        let si = [[s[1][1] / det, -s[0][1] / det], [-s[1][0] / det, s[0][0] / det]];
        let mut k = [[0.0; 2]; 4];
        for (i, row) in k.iter_mut().enumerate() {
            for j in 0..2 {
                row[j] = self.p[i][0] * si[0][j] + self.p[i][1] * si[1][j];
            }
        }
        let innov = [z[0] - self.x[0], z[1] - self.x[1]];
        for i in 0..4 {
            self.x[i] += k[i][0] * innov[0] + k[i][1] * innov[1];
        }
        let mut ikh = [[0.0; 4]; 4];
        for i in 0..4 {
            for j in 0..4 {
                let kh = if j < 2 { k[i][j] } else { 0.0 };
                ikh[i][j] = f64::from(u8::from(i == j)) - kh;
            }
        }
        let mut p = mat_mul(&mat_mul(&ikh, &self.p), &transpose(&ikh));
        for i in 0..4 {
            for j in 0..4 {
                p[i][j] += r * (k[i][0] * k[j][0] + k[i][1] * k[j][1]);
            }
        }
        self.p = p;
        self.guard();
    }

    pub fn position(&self) -> Center {
        [self.x[0], self.x[1]]
    }
}

/// Forecast from the Kalman filter of each vortex, plus any covariance
/// resets that happened. `times` holds one timestamp per history entry; the
/// last interval sets the prediction step.
pub fn kalman_forecast(history: &[CenterPair], times: &[f64], cfg: &KalmanConfig) -> Result<([CenterPair; 2], usize)> {
    cfg.validate()?;
    if history.is_empty() || times.len() != history.len() {
        return Err(VortexError::Data("Kalman forecast needs one timestamp per observation".into()));
    }
    let step = if times.len() >= 2 { times[times.len() - 1] - times[times.len() - 2] } else { 1.0 };
    let mut out = [[[0.0; 2]; 2]; 2];
    let mut resets = 0;
    for v in 0..2 {
        let mut kf = KalmanFilter::new(history[0][v], *cfg);
        for k in 1..history.len() {
            kf.predict(times[k] - times[k - 1]);
            kf.update(history[k][v]);
        }
        for h in 0..2 {
            kf.predict(step);
            out[h][v] = kf.position();
        }
        resets += kf.reset_count;
    }
    Ok((out, resets))
}

/// Recurrent forecaster over past center pairs only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryConfig {
    pub hidden: usize,
    pub coord_scale: f64,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        Self { hidden: 64, coord_scale: 100.0 }
    }
}

pub fn init_trajectory_params(cfg: &TrajectoryConfig, seed: u64) -> ParameterStore {
    let h = cfg.hidden;
    let mut r = rng::stream(seed, &[rng::tag::INIT, 2000]);
    let mut p = ParameterStore::new();
    p.insert("traj.lstm.w_ih", xavier_uniform(4, 4 * h, &mut r));
    p.insert("traj.lstm.w_hh", xavier_uniform(h, 4 * h, &mut r));
    let mut bias = vec![0.0; 4 * h];
    bias[h..2 * h].iter_mut().for_each(|b| *b = 1.0);
    p.insert("traj.lstm.bias", Tensor::new(vec![1, 4 * h], bias).expect("bias shape"));
    p.insert("traj.out.weight", xavier_uniform(h, 8, &mut r));
    p.insert("traj.out.bias", Tensor::zeros(&[1, 8]));
    p
}

fn traj_origin(history: &[CenterPair]) -> Center {
    let pts: Vec<[f64; 2]> = history.iter().flatten().copied().collect();
    mean_of(&pts)
}

fn traj_forward(
    g: &mut Graph,
    params: &ParameterStore,
    cfg: &TrajectoryConfig,
    histories: &[&[CenterPair]],
    train: bool,
) -> Result<Var> {
    let bind = |g: &mut Graph, name: &str| -> Result<Var> {
        let t = params.get(name)?.clone();
        Ok(if train { g.param(name, t) } else { g.constant(t) })
    };
    let w = LstmWeights { w_ih: bind(g, "traj.lstm.w_ih")?, w_hh: bind(g, "traj.lstm.w_hh")?, bias: bind(g, "traj.lstm.bias")? };
    let ow = bind(g, "traj.out.weight")?;
    let ob = bind(g, "traj.out.bias")?;
    let steps = histories.first().map_or(0, |h| h.len());
    if steps == 0 || histories.iter().any(|h| h.len() != steps) {
        return Err(VortexError::Data("trajectory histories must be non-empty and of equal length".into()));
    }
    let b = histories.len();
    let zero = Tensor::zeros(&[b, cfg.hidden]);
    let mut h = g.constant(zero.clone());
    let mut c = g.constant(zero);
    for t in 0..steps {
        let rows: Vec<[f64; 4]> = histories
            .iter()
            .map(|hist| {
                let o = traj_origin(hist);
                let p = hist[t];
                [p[0][0] - o[0], p[0][1] - o[1], p[1][0] - o[0], p[1][1] - o[1]].map(|v| v / cfg.coord_scale)
            })
            .collect();
        let x = g.constant(Tensor::from_rows(&rows)?);
        (h, c) = lstm_cell(g, x, h, c, w);
    }
    let out = g.linear(h, ow, ob);
    Ok(g.scale(out, cfg.coord_scale))
}

fn traj_target(history: &[CenterPair], future: &[CenterPair; 2]) -> [f64; 8] {
    let o = traj_origin(history);
    let mut row = [0.0; 8];
    for (h, pair) in future.iter().enumerate() {
        for v in 0..2 {
            row[4 * h + 2 * v] = pair[v][0] - o[0];
            row[4 * h + 2 * v + 1] = pair[v][1] - o[1];
        }
    }
    row
}

/// Trains the trajectory-only forecaster on `(history, future)` examples.
pub fn train_trajectory_forecaster(
    examples: &[(Vec<CenterPair>, [CenterPair; 2])],
    cfg: &TrajectoryConfig,
    train_cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if examples.is_empty() {
        return Err(VortexError::Empty("trajectory forecaster has no training examples".into()));
    }
    let init = init_trajectory_params(cfg, train_cfg.seed);
    optimize(examples.len(), init, train_cfg, |g, p, idx| {
        let hists: Vec<&[CenterPair]> = idx.iter().map(|&i| examples[i].0.as_slice()).collect();
        let pred = traj_forward(g, p, cfg, &hists, true)?;
        let rows: Vec<[f64; 8]> = idx.iter().map(|&i| traj_target(&examples[i].0, &examples[i].1)).collect();
        let y = g.constant(Tensor::from_rows(&rows)?);
        Ok(mse(g, pred, y))
    })
}

pub fn trajectory_predict(
    params: &ParameterStore,
    cfg: &TrajectoryConfig,
    histories: &[&[CenterPair]],
) -> Result<Vec<[CenterPair; 2]>> {
    if histories.is_empty() {
        return Ok(Vec::new());
    }
    let mut g = Graph::new();
    let out = traj_forward(&mut g, params, cfg, histories, false)?;
    let t = g.value(out);
    Ok(histories
        .iter()
        .enumerate()
        .map(|(i, hist)| {
            let o = traj_origin(hist);
            let v = t.row_slice(i);
            let c = |k: usize| [v[k] + o[0], v[k + 1] + o[1]];
            [[c(0), c(2)], [c(4), c(6)]]
        })
        .collect())
}
