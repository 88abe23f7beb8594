//! End-to-end experiment harness: probe, label efficiency, forecasting and
//! ablations, each run over several seeds and summarized by the median.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use vortexlab_tensor::ParameterStore;

use crate::augment::AugmentConfig;
use crate::baselines::{
    constant_velocity_forecast, dbscan_centers, intensity_centroid, kalman_forecast, train_trajectory_forecaster,
    trajectory_predict, DbscanConfig, KalmanConfig, TrajectoryConfig,
};
use crate::contrastive::{pretrain, PretrainConfig};
use crate::data::{prepare_sequences, select_by_recording, split_dataset, CenterPair, PrepConfig, ScanSequence, SplitSpec};
use crate::error::{Result, VortexError};
use crate::eval::{forecast_rmse, linear_probe, median, rmse_centers, ProbeConfig};
use crate::finetune::{final_centers, train_forecaster, train_localizer, ForecastSample, TrainConfig, TrainOutcome, Trainable};
use crate::io::MetricRecord;
use crate::model::{embed_sequences, init_params, predict_centers, predict_forecast, Aggregator, ModelConfig};
use crate::rng::{self, derive_seed, tag};
use crate::sim::{simulate_all, CatalogConfig, SimConfig, SimulatedSequence};

const INFER_CHUNK: usize = 32;

/// Everything an experiment run depends on. Its JSON form is hashed into
/// every report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    pub seed: u64,
    pub n_unlabeled: usize,
    pub n_labeled: usize,
    pub n_forecast_test: usize,
    pub label_noise_sigma: f64,
    /// Initial-height range of the forecasting test scenarios.
    pub forecast_test_height: [f64; 2],
    /// Ranges of the per-site lateral and altitude offsets of reported coordinates.
    pub site_lateral: [f64; 2],
    pub site_elevation: [f64; 2],
    pub prep: PrepConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub finetune: TrainConfig,
    pub forecast: TrainConfig,
    pub probe: ProbeConfig,
    pub trajectory: TrajectoryConfig,
    pub dbscan_grid: Vec<DbscanConfig>,
    pub kalman_grid: Vec<KalmanConfig>,
    pub fractions: Vec<f64>,
    /// Label fraction used when fine-tuning ablation variants.
    pub ablation_fraction: f64,
    pub n_seeds: usize,
}

impl Default for Profile {
    fn default() -> Self {
        let mut dbscan_grid = Vec::new();
        for eps in [5.0, 8.0, 12.0] {
            for min_pts in [5, 10] {
                for velocity_threshold in [1.0, 1.5, 2.5] {
                    dbscan_grid.push(DbscanConfig { eps, min_pts, velocity_threshold });
                }
            }
        }
        let mut kalman_grid = Vec::new();
        for q in [0.05, 0.5, 5.0] {
            for r in [4.0, 16.0, 64.0, 256.0] {
                kalman_grid.push(KalmanConfig { q, r, ..Default::default() });
            }
        }
        Self {
            seed: 7,
            n_unlabeled: 2000,
            n_labeled: 400,
            n_forecast_test: 100,
            label_noise_sigma: 15.0,
            forecast_test_height: [40.0, 90.0],
            site_lateral: [-100.0, 100.0],
            site_elevation: [0.0, 200.0],
            prep: PrepConfig::default(),
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            finetune: TrainConfig { lr0: 3e-3, ..Default::default() },
            forecast: TrainConfig { lr0: 1e-2, min_steps: 600, ..Default::default() },
            probe: ProbeConfig::default(),
            trajectory: TrajectoryConfig::default(),
            dbscan_grid,
            kalman_grid,
            fractions: vec![0.01, 0.1, 1.0],
            ablation_fraction: 0.1,
            n_seeds: 3,
        }
    }
}

impl Profile {
    /// Reduced widths and point counts that fit a single CPU core.
    pub fn reduced() -> Self {
        Self {
            n_unlabeled: 600,
            prep: PrepConfig { n_points: 256, ..Default::default() },
            model: ModelConfig {
                point_widths: vec![3, 32, 64, 64],
                hidden: 64,
                proj_widths: vec![64, 32],
                center_hidden: 32,
                forecast_hidden: 64,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    /// Tiny sizes for plumbing tests; numbers it produces are meaningless.
    pub fn smoke() -> Self {
        let d = Self::default();
        Self {
            n_unlabeled: 24,
            n_labeled: 30,
            n_forecast_test: 8,
            prep: PrepConfig { n_points: 48, ..Default::default() },
            model: ModelConfig {
                point_widths: vec![3, 8, 16],
                hidden: 8,
                proj_widths: vec![8, 8],
                center_hidden: 8,
                forecast_hidden: 8,
                ..Default::default()
            },
            pretrain: PretrainConfig { epochs: 2, batch_size: 8, ..Default::default() },
            finetune: TrainConfig { epochs: 2, min_steps: 4, ..d.finetune },
            forecast: TrainConfig { epochs: 2, min_steps: 4, ..d.forecast },
            probe: ProbeConfig { epochs: 20, ..Default::default() },
            trajectory: TrajectoryConfig { hidden: 8, ..Default::default() },
            dbscan_grid: d.dbscan_grid[..2].to_vec(),
            kalman_grid: d.kalman_grid[..2].to_vec(),
            n_seeds: 1,
            ..d
        }
    }

    pub fn config_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("profile serializes");
        Sha256::digest(&json).iter().take(8).fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    pub fn run_seed(&self, k: usize) -> u64 {
        derive_seed(self.seed, &[100, k as u64])
    }
}

/// Labeled sequences twice: with the published (possibly noisy) labels used
/// for training, and with exact labels used only for scoring.
#[derive(Clone, Debug)]
pub struct LabeledSet {
    pub observed: Vec<ScanSequence>,
    pub truth: Vec<ScanSequence>,
}

impl LabeledSet {
    pub fn from_recordings(observed: &[ScanSequence], truth: &[ScanSequence], prep: PrepConfig, seed: u64) -> Result<Self> {
        Ok(Self { observed: prepare_sequences(observed, prep, seed)?, truth: prepare_sequences(truth, prep, seed)? })
    }

    pub fn select(&self, ids: &[String]) -> (Vec<&ScanSequence>, Vec<&ScanSequence>) {
        (select_by_recording(&self.observed, ids), select_by_recording(&self.truth, ids))
    }
}

/// Simulated raw recordings for one profile.
#[derive(Clone, Debug)]
pub struct DeskData {
    pub unlabeled: Vec<ScanSequence>,
    pub labeled_obs: Vec<ScanSequence>,
    pub labeled_truth: Vec<ScanSequence>,
    pub forecast_obs: Vec<ScanSequence>,
    pub forecast_truth: Vec<ScanSequence>,
    pub unlabeled_split: SplitSpec,
    pub labeled_split: SplitSpec,
}

fn obs_truth(sims: &[SimulatedSequence]) -> (Vec<ScanSequence>, Vec<ScanSequence>) {
    let obs = sims.iter().map(|s| s.to_scan_sequence(true)).collect();
    let truth = sims
        .iter()
        .map(|s| {
            let mut q = s.to_scan_sequence(true);
            q.centers = Some(s.true_centers());
            q
        })
        .collect();
    (obs, truth)
}

impl DeskData {
    pub fn simulate(p: &Profile) -> Result<Self> {
        let catalog = CatalogConfig { site_lateral: p.site_lateral, site_elevation: p.site_elevation, ..Default::default() };
        let base = SimConfig { n_frames: p.prep.sequence_len, catalog: catalog.clone(), ..Default::default() };
        let unl = simulate_all(&SimConfig {
            n_sequences: p.n_unlabeled,
            seed: derive_seed(p.seed, &[1]),
            labeled: false,
            ..base.clone()
        })?;
        let lab = simulate_all(&SimConfig {
            n_sequences: p.n_labeled,
            seed: derive_seed(p.seed, &[2]),
            label_noise_sigma: p.label_noise_sigma,
            ..base.clone()
        })?;
        let fc = simulate_all(&SimConfig {
            n_sequences: p.n_forecast_test,
            seed: derive_seed(p.seed, &[3]),
            label_noise_sigma: p.label_noise_sigma,
            catalog: CatalogConfig { initial_height: p.forecast_test_height, ..catalog },
            ..base
        })?;
        let unlabeled: Vec<ScanSequence> = unl.iter().map(|s| s.to_scan_sequence(false)).collect();
        let (labeled_obs, labeled_truth) = obs_truth(&lab);
        let (forecast_obs, forecast_truth) = obs_truth(&fc);
        Self::from_parts(unlabeled, labeled_obs, labeled_truth, forecast_obs, forecast_truth, p.seed)
    }

    pub fn from_parts(
        unlabeled: Vec<ScanSequence>,
        labeled_obs: Vec<ScanSequence>,
        labeled_truth: Vec<ScanSequence>,
        forecast_obs: Vec<ScanSequence>,
        forecast_truth: Vec<ScanSequence>,
        seed: u64,
    ) -> Result<Self> {
        let ids = |v: &[ScanSequence]| v.iter().map(|s| s.event_id.clone()).collect::<Vec<_>>();
        let unlabeled_split = split_dataset(&ids(&unlabeled), [0.7, 0.2, 0.1], derive_seed(seed, &[tag::SPLIT, 1]))?;
        let labeled_split = split_dataset(&ids(&labeled_obs), [0.7, 0.2, 0.1], derive_seed(seed, &[tag::SPLIT, 2]))?;
        Ok(Self { unlabeled, labeled_obs, labeled_truth, forecast_obs, forecast_truth, unlabeled_split, labeled_split })
    }
}

/// Model-ready sequences under one preprocessing choice.
pub struct Prepared {
    pub unlabeled: Vec<ScanSequence>,
    pub labeled: LabeledSet,
    pub forecast_test: LabeledSet,
}

impl Prepared {
    pub fn new(d: &DeskData, prep: PrepConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            unlabeled: prepare_sequences(&d.unlabeled, prep, derive_seed(seed, &[tag::POINT_COUNT, 1]))?,
            labeled: LabeledSet::from_recordings(
                &d.labeled_obs,
                &d.labeled_truth,
                prep,
                derive_seed(seed, &[tag::POINT_COUNT, 2]),
            )?,
            forecast_test: LabeledSet::from_recordings(
                &d.forecast_obs,
                &d.forecast_truth,
                prep,
                derive_seed(seed, &[tag::POINT_COUNT, 3]),
            )?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    NoTemporalSubsampling,
    NoSpatialMasking,
    NoCentering,
    MeanPooling,
}

impl Variant {
    pub const ALL: [Variant; 5] =
        [Variant::Full, Variant::NoTemporalSubsampling, Variant::NoSpatialMasking, Variant::NoCentering, Variant::MeanPooling];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "X-VORTEX (full)",
            Variant::NoTemporalSubsampling => "w/o temporal subsampling (view 2)",
            Variant::NoSpatialMasking => "w/o spatial masking (view 2)",
            Variant::NoCentering => "w/o altitude centering (raw coords)",
            Variant::MeanPooling => "w/o LSTM (mean pooling)",
        }
    }

    pub fn model(self, base: &ModelConfig) -> ModelConfig {
        match self {
            Variant::MeanPooling => ModelConfig { aggregator: Aggregator::MeanPool, ..base.clone() },
            _ => base.clone(),
        }
    }

    pub fn augment(self, base: &AugmentConfig, t: usize) -> AugmentConfig {
        match self {
            Variant::NoTemporalSubsampling => AugmentConfig { min_frames_kept: t, ..*base },
            Variant::NoSpatialMasking => AugmentConfig { dropout_p: 0.0, ..*base },
            _ => *base,
        }
    }

    pub fn prep(self, base: PrepConfig) -> PrepConfig {
        match self {
            Variant::NoCentering => PrepConfig { center: false, ..base },
            _ => base,
        }
    }
}

/// A pretrained encoder for one variant and seed.
#[derive(Clone, Debug)]
pub struct Pretrained {
    pub variant: Variant,
    pub seed: u64,
    pub model: ModelConfig,
    pub params: ParameterStore,
    pub metrics: Vec<MetricRecord>,
}

pub fn pretrain_variant(p: &Profile, prepared: &Prepared, split: &SplitSpec, variant: Variant, seed: u64) -> Result<Pretrained> {
    let model = variant.model(&p.model);
    let cfg = PretrainConfig { augment: variant.augment(&p.pretrain.augment, p.prep.sequence_len), seed, ..p.pretrain.clone() };
    let train = select_by_recording(&prepared.unlabeled, &split.train);
    let val = select_by_recording(&prepared.unlabeled, &split.val);
    let out = pretrain(&train, &val, &model, &cfg, None, |_| {})?;
    Ok(Pretrained { variant, seed, model, params: out.params, metrics: out.metrics })
}

/// Deterministic subset of `n` items of size `max(1, round(fraction * n))`.
pub fn label_subset(n: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    let k = ((fraction * n as f64).round() as usize).min(n);
    let k = if fraction > 0.0 { k.max(1) } else { k };
    if k == 0 || n == 0 {
        return Err(VortexError::Empty(format!("fraction {fraction} of {n} sequences selects nothing")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), &mut rng::stream(seed, &[tag::SUBSET]));
    let mut out = idx[..k].to_vec();
    out.sort_unstable();
    Ok(out)
}

fn truth_finals(truth: &[&ScanSequence]) -> Result<Vec<CenterPair>> {
    truth.iter().map(|s| final_centers(s)).collect()
}

/// The labeled training sequences used at `fraction`.
pub fn training_subset<'l>(
    labeled: &'l LabeledSet,
    split: &SplitSpec,
    fraction: f64,
    seed: u64,
) -> Result<Vec<&'l ScanSequence>> {
    let (train_obs, _) = labeled.select(&split.train);
    let subset = label_subset(train_obs.len(), fraction, derive_seed(seed, &[(fraction * 1e6) as u64]))?;
    Ok(subset.iter().map(|&i| train_obs[i]).collect())
}

/// Fine-tunes the soft-center head from `init` on a fraction of the training split.
pub fn fit_localizer(
    p: &Profile,
    model: &ModelConfig,
    init: ParameterStore,
    trainable: Trainable,
    labeled: &LabeledSet,
    split: &SplitSpec,
    fraction: f64,
    seed: u64,
) -> Result<TrainOutcome> {
    let train = training_subset(labeled, split, fraction, seed)?;
    let cfg = TrainConfig { seed, ..p.finetune.clone() };
    train_localizer(&train, model, init, trainable, &cfg)
}

/// Final-frame center RMSE against the exact labels of the sequences in `ids`.
pub fn score_localizer(params: &ParameterStore, model: &ModelConfig, labeled: &LabeledSet, ids: &[String]) -> Result<f64> {
    let (obs, truth) = labeled.select(ids);
    let preds = predict_centers(params, model, &obs, INFER_CHUNK)?;
    rmse_centers(&preds, &truth_finals(&truth)?)
}

/// Trains the soft-center head from `init` and returns test RMSE in metres.
pub fn localization_rmse(
    p: &Profile,
    model: &ModelConfig,
    init: ParameterStore,
    trainable: Trainable,
    labeled: &LabeledSet,
    split: &SplitSpec,
    fraction: f64,
    seed: u64,
) -> Result<f64> {
    let out = fit_localizer(p, model, init, trainable, labeled, split, fraction, seed)?;
    score_localizer(&out.params, model, labeled, &split.test)
}

/// Heuristic localization RMSE on the test split.
pub fn heuristic_rmse(labeled: &LabeledSet, ids: &[String], method: impl Fn(&ScanSequence) -> CenterPair + Sync) -> Result<f64> {
    let (obs, truth) = labeled.select(ids);
    let preds: Vec<CenterPair> = obs.par_iter().map(|s| method(s)).collect();
    rmse_centers(&preds, &truth_finals(&truth)?)
}

pub fn dbscan_method(cfg: DbscanConfig) -> impl Fn(&ScanSequence) -> CenterPair + Sync {
    move |s: &ScanSequence| dbscan_centers(s.frames.last().expect("non-empty"), &cfg)
}

pub fn intensity_method(s: &ScanSequence) -> CenterPair {
    intensity_centroid(s.frames.last().expect("non-empty"))
}

/// Picks the DBSCAN settings with the lowest validation RMSE (first wins ties).
pub fn tune_dbscan(p: &Profile, labeled: &LabeledSet, split: &SplitSpec) -> Result<DbscanConfig> {
    let mut best = (f64::INFINITY, DbscanConfig::default());
    for cfg in &p.dbscan_grid {
        let r = heuristic_rmse(labeled, &split.val, dbscan_method(*cfg))?;
        if r < best.0 {
            best = (r, *cfg);
        }
    }
    Ok(best.1)
}

/// Forecasting examples built from observed and exact labels.
pub struct ForecastSet {
    pub observed: Vec<ForecastSample>,
    pub truth: Vec<ForecastSample>,
}

impl ForecastSet {
    pub fn new(obs: &[&ScanSequence], truth: &[&ScanSequence]) -> Result<Self> {
        Ok(Self {
            observed: obs.iter().map(|s| ForecastSample::from_sequence(s)).collect::<Result<_>>()?,
            truth: truth.iter().map(|s| ForecastSample::from_sequence(s)).collect::<Result<_>>()?,
        })
    }

    /// Exact future centers in absolute coordinates.
    pub fn absolute_targets(&self) -> Vec<[CenterPair; 2]> {
        self.truth.iter().map(|s| [s.to_absolute(&s.targets[0]), s.to_absolute(&s.targets[1])]).collect()
    }

    /// Observed history labels in absolute coordinates.
    pub fn absolute_histories(&self) -> Vec<Vec<CenterPair>> {
        self.observed.iter().map(|s| s.history_centers.iter().map(|c| s.to_absolute(c)).collect()).collect()
    }

    /// Forecasting examples for the sequences of `labeled` in `ids`.
    pub fn select(labeled: &LabeledSet, ids: &[String]) -> Result<Self> {
        let (obs, truth) = labeled.select(ids);
        Self::new(&obs, &truth)
    }

    pub fn history_times(&self) -> Vec<Vec<f64>> {
        self.observed.iter().map(|s| s.timestamps[..s.history.len()].to_vec()).collect()
    }
}

pub fn cv_rmse(set: &ForecastSet) -> Result<[f64; 2]> {
    let preds: Vec<[CenterPair; 2]> =
        set.absolute_histories().iter().map(|h| constant_velocity_forecast(h)).collect::<Result<_>>()?;
    forecast_rmse(&preds, &set.absolute_targets())
}

pub fn kalman_rmse(set: &ForecastSet, cfg: &KalmanConfig) -> Result<[f64; 2]> {
    let times = set.history_times();
    let preds: Vec<[CenterPair; 2]> = set
        .absolute_histories()
        .iter()
        .zip(&times)
        .map(|(h, t)| kalman_forecast(h, t, cfg).map(|(f, _)| f))
        .collect::<Result<_>>()?;
    forecast_rmse(&preds, &set.absolute_targets())
}

/// Kalman settings with the lowest validation RMSE at `t+1`.
pub fn tune_kalman(p: &Profile, val: &ForecastSet) -> Result<KalmanConfig> {
    let mut best = (f64::INFINITY, KalmanConfig::default());
    for cfg in &p.kalman_grid {
        let r = kalman_rmse(val, cfg)?[0];
        if r < best.0 {
            best = (r, *cfg);
        }
    }
    Ok(best.1)
}

fn traj_examples(set: &ForecastSet) -> Vec<(Vec<CenterPair>, [CenterPair; 2])> {
    set.observed
        .iter()
        .map(|s| {
            let hist = s.history_centers.iter().map(|c| s.to_absolute(c)).collect();
            (hist, [s.to_absolute(&s.targets[0]), s.to_absolute(&s.targets[1])])
        })
        .collect()
}

pub fn trajectory_rmse(p: &Profile, train: &ForecastSet, test: &ForecastSet, seed: u64) -> Result<[f64; 2]> {
    let cfg = TrainConfig { seed, ..p.forecast.clone() };
    let out = train_trajectory_forecaster(&traj_examples(train), &p.trajectory, &cfg)?;
    let hists = test.absolute_histories();
    let refs: Vec<&[CenterPair]> = hists.iter().map(Vec::as_slice).collect();
    let preds = trajectory_predict(&out.params, &p.trajectory, &refs)?;
    forecast_rmse(&preds, &test.absolute_targets())
}

pub fn fit_forecaster(
    p: &Profile,
    model: &ModelConfig,
    init: ParameterStore,
    trainable: Trainable,
    train: &ForecastSet,
    seed: u64,
) -> Result<TrainOutcome> {
    let cfg = TrainConfig { seed, ..p.forecast.clone() };
    train_forecaster(&train.observed, model, init, trainable, &cfg)
}

pub fn score_forecaster(params: &ParameterStore, model: &ModelConfig, test: &ForecastSet) -> Result<[f64; 2]> {
    let hist: Vec<&ScanSequence> = test.observed.iter().map(|s| &s.history).collect();
    let rel = predict_forecast(params, model, &hist, INFER_CHUNK)?;
    let preds: Vec<[CenterPair; 2]> =
        rel.iter().zip(&test.observed).map(|(r, s)| [s.to_absolute(&r[0]), s.to_absolute(&r[1])]).collect();
    forecast_rmse(&preds, &test.absolute_targets())
}

/// Trains the forecast head on top of `init` and scores it on `test`.
pub fn xvortex_forecast_rmse(
    p: &Profile,
    model: &ModelConfig,
    init: ParameterStore,
    trainable: Trainable,
    train: &ForecastSet,
    test: &ForecastSet,
    seed: u64,
) -> Result<[f64; 2]> {
    let out = fit_forecaster(p, model, init, trainable, train, seed)?;
    score_forecaster(&out.params, model, test)
}

/// One row of a report table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    /// Free-form setting such as the label fraction or input view.
    pub setting: String,
    /// Metric name to per-seed values.
    pub values: Vec<(String, Vec<f64>)>,
}

impl ReportRow {
    pub fn median_of(&self, metric: &str) -> Option<f64> {
        self.values.iter().find(|(m, _)| m == metric).map(|(_, v)| median(v))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub experiment: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<ReportRow>,
}

fn fmt(v: f64) -> String {
    format!("{v:.4}")
}

impl ExperimentReport {
    pub fn row(&self, method: &str, setting: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.method == method && r.setting == setting)
    }

    /// CSV with per-seed values, medians and any extra columns.
    pub fn to_csv(&self, extra: &dyn Fn(&ReportRow) -> Vec<(String, String)>) -> String {
        let mut out = String::new();
        let Some(first) = self.rows.first() else {
            return out;
        };
        let mut header = vec!["method".to_string(), "setting".to_string()];
        for (m, v) in &first.values {
            header.extend((0..v.len()).map(|k| format!("{m}_seed{k}")));
            header.push(format!("{m}_median"));
        }
        header.extend(extra(first).into_iter().map(|(k, _)| k));
        header.push("seeds".into());
        header.push("config_hash".into());
        let _ = writeln!(out, "{}", header.join(","));
        let seeds = self.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(" ");
        for r in &self.rows {
            let mut cells = vec![r.method.clone(), r.setting.clone()];
            for (_, v) in &r.values {
                cells.extend(v.iter().map(|x| fmt(*x)));
                cells.push(fmt(median(v)));
            }
            cells.extend(extra(r).into_iter().map(|(_, v)| v));
            cells.push(seeds.clone());
            cells.push(self.config_hash.clone());
            let _ = writeln!(out, "{}", cells.join(","));
        }
        out
    }
}

pub const TABLE1: &str = "table1_probe.csv";
pub const TABLE2: &str = "table2_label_efficiency.csv";
pub const TABLE3: &str = "table3_forecast.csv";
pub const TABLE4: &str = "table4_ablation.csv";

pub const METHOD_RANDOM: &str = "Random-init encoder (frozen)";
pub const METHOD_SPATIAL: &str = "Spatial-only (single frame)";
pub const METHOD_XVORTEX: &str = "X-VORTEX";
pub const METHOD_SCRATCH: &str = "Supervised PointNet + LSTM";
pub const METHOD_DBSCAN: &str = "DBSCAN";
pub const METHOD_INTENSITY: &str = "Intensity centroid";
pub const METHOD_CV: &str = "Constant velocity";
pub const METHOD_KALMAN: &str = "Kalman filter";
pub const METHOD_TRAJ: &str = "Trajectory-only LSTM";

pub fn table2_csv(r: &ExperimentReport) -> String {
    r.to_csv(&|row| {
        let ours = row.median_of("rmse").unwrap_or(f64::NAN);
        let best_baseline = r
            .rows
            .iter()
            .filter(|o| o.setting == row.setting && o.method != METHOD_XVORTEX)
            .filter_map(|o| o.median_of("rmse"))
            .fold(f64::INFINITY, f64::min);
        let delta = if row.method == METHOD_XVORTEX { fmt(ours - best_baseline) } else { String::new() };
        vec![("delta_vs_best_baseline".into(), delta)]
    })
}

pub fn table4_csv(r: &ExperimentReport) -> String {
    let full = r.row(Variant::Full.label(), "");
    r.to_csv(&|row| {
        let d = |m: &str| match (row.median_of(m), full.and_then(|f| f.median_of(m))) {
            (Some(a), Some(b)) => fmt(a - b),
            _ => String::new(),
        };
        vec![("delta_center_rmse".into(), d("center_rmse")), ("delta_forecast_t1_rmse".into(), d("forecast_t1_rmse"))]
    })
}

pub fn plain_csv(r: &ExperimentReport) -> String {
    r.to_csv(&|_| Vec::new())
}

/// Single-frame sequences, one per recording, for the spatial-only row.
pub fn single_frames(seqs: &[&ScanSequence], seed: u64, all: bool) -> Vec<ScanSequence> {
    let mut out = Vec::new();
    for (i, s) in seqs.iter().enumerate() {
        let picks: Vec<usize> = if all {
            (0..s.len()).collect()
        } else {
            let mut r = rng::stream(seed, &[tag::SUBSET, i as u64]);
            vec![rand::Rng::gen_range(&mut r, 0..s.len())]
        };
        for k in picks {
            let mut f = s.select_frames(&[k]);
            f.event_id = format!("{}/f{k}", s.event_id);
            out.push(f);
        }
    }
    out
}

fn class_labels(seqs: &[&ScanSequence]) -> Result<Vec<usize>> {
    seqs.iter().map(|s| s.class_id.ok_or_else(|| VortexError::Data(format!("{} has no class label", s.event_id)))).collect()
}

pub fn probe_accuracy(
    p: &Profile,
    model: &ModelConfig,
    params: &ParameterStore,
    train: &[&ScanSequence],
    test: &[&ScanSequence],
    seed: u64,
) -> Result<f64> {
    let xtr = embed_sequences(params, model, train, INFER_CHUNK)?;
    let xte = embed_sequences(params, model, test, INFER_CHUNK)?;
    let n_classes = crate::sim::CatalogConfig::default().classes.len();
    let cfg = ProbeConfig { seed, ..p.probe };
    linear_probe(&xtr, &class_labels(train)?, &xte, &class_labels(test)?, n_classes, &cfg)
}

/// Everything the four tables need, computed once.
pub struct Suite<'a> {
    pub profile: &'a Profile,
    pub data: &'a DeskData,
    pub centered: Prepared,
    raw: std::sync::OnceLock<Prepared>,
}

impl<'a> Suite<'a> {
    pub fn new(profile: &'a Profile, data: &'a DeskData) -> Result<Self> {
        Ok(Self { profile, data, centered: Prepared::new(data, profile.prep, profile.seed)?, raw: std::sync::OnceLock::new() })
    }

    /// Prepared data for a variant; uncentered data is built on first use.
    pub fn prepared(&self, v: Variant) -> Result<&Prepared> {
        if v != Variant::NoCentering {
            return Ok(&self.centered);
        }
        if self.raw.get().is_none() {
            let raw = Prepared::new(self.data, v.prep(self.profile.prep), self.profile.seed)?;
            let _ = self.raw.set(raw);
        }
        Ok(self.raw.get().expect("initialized above"))
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.profile.n_seeds).map(|k| self.profile.run_seed(k)).collect()
    }

    pub fn pretrain(&self, v: Variant, seed: u64) -> Result<Pretrained> {
        pretrain_variant(self.profile, self.prepared(v)?, &self.data.unlabeled_split, v, seed)
    }

    /// Probe accuracy of the frozen random-init, pretrained and spatial-only encoders.
    pub fn table1(&self, full: &[Pretrained]) -> Result<ExperimentReport> {
        let p = self.profile;
        let split = &self.data.labeled_split;
        let lab = &self.centered.labeled;
        let (train, _) = lab.select(&split.train);
        let mut held: Vec<String> = split.val.clone();
        held.extend(split.test.iter().cloned());
        let (test, _) = lab.select(&held);
        let mut random = Vec::new();
        let mut ours = Vec::new();
        let mut spatial = Vec::new();
        let spatial_model = ModelConfig { aggregator: Aggregator::MeanPool, ..p.model.clone() };
        for pre in full {
            let seed = pre.seed;
            let init = init_params(&p.model, seed)?;
            random.push(probe_accuracy(p, &p.model, &init, &train, &test, seed)?);
            ours.push(probe_accuracy(p, &p.model, &pre.params, &train, &test, seed)?);
            let unl_train = select_by_recording(&self.centered.unlabeled, &self.data.unlabeled_split.train);
            let unl_val = select_by_recording(&self.centered.unlabeled, &self.data.unlabeled_split.val);
            let ftr = single_frames(&unl_train, seed, false);
            let fva = single_frames(&unl_val, seed, false);
            let cfg = PretrainConfig {
                augment: AugmentConfig { min_frames_kept: 1, ..p.pretrain.augment },
                seed,
                ..p.pretrain.clone()
            };
            let out =
                pretrain(&ftr.iter().collect::<Vec<_>>(), &fva.iter().collect::<Vec<_>>(), &spatial_model, &cfg, None, |_| {})?;
            let ptr = single_frames(&train, seed, true);
            let pte = single_frames(&test, seed, true);
            spatial.push(probe_accuracy(
                p,
                &spatial_model,
                &out.params,
                &ptr.iter().collect::<Vec<_>>(),
                &pte.iter().collect::<Vec<_>>(),
                seed,
            )?);
        }
        let row = |m: &str, s: &str, v: Vec<f64>| ReportRow {
            method: m.into(),
            setting: s.into(),
            values: vec![("accuracy".into(), v)],
        };
        Ok(ExperimentReport {
            experiment: "probe".into(),
            config_hash: p.config_hash(),
            seeds: full.iter().map(|x| x.seed).collect(),
            rows: vec![
                row(METHOD_RANDOM, "sequence", random),
                row(METHOD_SPATIAL, "frame", spatial),
                row(METHOD_XVORTEX, "sequence", ours),
            ],
        })
    }

    /// Center RMSE for each label fraction and method.
    pub fn table2(&self, full: &[Pretrained]) -> Result<ExperimentReport> {
        let p = self.profile;
        let split = &self.data.labeled_split;
        let lab = &self.centered.labeled;
        let db = tune_dbscan(p, lab, split)?;
        let db_rmse = heuristic_rmse(lab, &split.test, dbscan_method(db))?;
        let in_rmse = heuristic_rmse(lab, &split.test, intensity_method)?;
        let mut rows = Vec::new();
        for &fr in &p.fractions {
            let setting = format!("{}%", fr * 100.0);
            let mut scratch = Vec::new();
            let mut ours = Vec::new();
            for pre in full {
                let seed = pre.seed;
                let init = init_params(&p.model, derive_seed(seed, &[tag::INIT, 1]))?;
                scratch.push(localization_rmse(p, &p.model, init, Trainable::All, lab, split, fr, seed)?);
                ours.push(localization_rmse(p, &p.model, pre.params.clone(), Trainable::FrozenEncoder, lab, split, fr, seed)?);
            }
            let n = full.len();
            let row =
                |m: &str, v: Vec<f64>| ReportRow { method: m.into(), setting: setting.clone(), values: vec![("rmse".into(), v)] };
            rows.push(row(METHOD_DBSCAN, vec![db_rmse; n]));
            rows.push(row(METHOD_INTENSITY, vec![in_rmse; n]));
            rows.push(row(METHOD_SCRATCH, scratch));
            rows.push(row(METHOD_XVORTEX, ours));
        }
        Ok(ExperimentReport {
            experiment: "label-efficiency".into(),
            config_hash: p.config_hash(),
            seeds: full.iter().map(|x| x.seed).collect(),
            rows,
        })
    }

    fn forecast_sets(&self, prepared: &Prepared) -> Result<(ForecastSet, ForecastSet, ForecastSet)> {
        let split = &self.data.labeled_split;
        let te_o: Vec<&ScanSequence> = prepared.forecast_test.observed.iter().collect();
        let te_t: Vec<&ScanSequence> = prepared.forecast_test.truth.iter().collect();
        Ok((
            ForecastSet::select(&prepared.labeled, &split.train)?,
            ForecastSet::select(&prepared.labeled, &split.val)?,
            ForecastSet::new(&te_o, &te_t)?,
        ))
    }

    /// Forecast RMSE at both horizons on the ground-effect-rich test set.
    pub fn table3(&self, full: &[Pretrained]) -> Result<ExperimentReport> {
        let p = self.profile;
        let (train, val, test) = self.forecast_sets(&self.centered)?;
        let cv = cv_rmse(&test)?;
        let kcfg = tune_kalman(p, &val)?;
        let kf = kalman_rmse(&test, &kcfg)?;
        let n = full.len();
        let mut traj = [Vec::new(), Vec::new()];
        let mut ours = [Vec::new(), Vec::new()];
        for pre in full {
            let t = trajectory_rmse(p, &train, &test, pre.seed)?;
            let o = xvortex_forecast_rmse(p, &p.model, pre.params.clone(), Trainable::HeadsOnly, &train, &test, pre.seed)?;
            for h in 0..2 {
                traj[h].push(t[h]);
                ours[h].push(o[h]);
            }
        }
        let row = |m: &str, a: Vec<f64>, b: Vec<f64>| ReportRow {
            method: m.into(),
            setting: String::new(),
            values: vec![("rmse_t1".into(), a), ("rmse_t2".into(), b)],
        };
        Ok(ExperimentReport {
            experiment: "forecast".into(),
            config_hash: p.config_hash(),
            seeds: full.iter().map(|x| x.seed).collect(),
            rows: vec![
                row(METHOD_CV, vec![cv[0]; n], vec![cv[1]; n]),
                row(METHOD_KALMAN, vec![kf[0]; n], vec![kf[1]; n]),
                row(METHOD_TRAJ, traj[0].clone(), traj[1].clone()),
                row(METHOD_XVORTEX, ours[0].clone(), ours[1].clone()),
            ],
        })
    }

    /// Center RMSE and `t+1` forecast RMSE for the full model and each ablation.
    /// `full` supplies the full-model encoders so they are not retrained.
    pub fn table4(&self, full: &[Pretrained]) -> Result<ExperimentReport> {
        let p = self.profile;
        let mut rows = Vec::new();
        for v in Variant::ALL {
            let mut center = Vec::new();
            let mut fc = Vec::new();
            for base in full {
                let pre = if v == Variant::Full { base.clone() } else { self.pretrain(v, base.seed)? };
                let prepared = self.prepared(v)?;
                let split = &self.data.labeled_split;
                center.push(localization_rmse(
                    p,
                    &pre.model,
                    pre.params.clone(),
                    Trainable::FrozenEncoder,
                    &prepared.labeled,
                    split,
                    p.ablation_fraction,
                    pre.seed,
                )?);
                let (train, _, test) = self.forecast_sets(self.prepared(v)?)?;
                fc.push(xvortex_forecast_rmse(p, &pre.model, pre.params, Trainable::HeadsOnly, &train, &test, pre.seed)?[0]);
            }
            rows.push(ReportRow {
                method: v.label().into(),
                setting: String::new(),
                values: vec![("center_rmse".into(), center), ("forecast_t1_rmse".into(), fc)],
            });
        }
        Ok(ExperimentReport {
            experiment: "ablation".into(),
            config_hash: p.config_hash(),
            seeds: full.iter().map(|x| x.seed).collect(),
            rows,
        })
    }
}
