//! Subcommand implementations.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use vortexlab::baselines::{dbscan_centers, intensity_centroid, DbscanConfig, KalmanConfig};
use vortexlab::contrastive::{pretrain, PretrainConfig};
use vortexlab::data::{
    prepare_sequences, recording_id, select_by_recording, split_dataset, CenterPair, PrepConfig, ScanSequence, SplitSpec,
};
use vortexlab::experiments::{
    cv_rmse, dbscan_method, fit_forecaster, fit_localizer, heuristic_rmse, intensity_method, kalman_rmse, localization_rmse,
    plain_csv, probe_accuracy, score_forecaster, score_localizer, table2_csv, table4_csv, trajectory_rmse, DeskData, ForecastSet,
    LabeledSet, Profile, Suite, Variant, TABLE1, TABLE2, TABLE3, TABLE4,
};
use vortexlab::finetune::Trainable;
use vortexlab::io::{
    self, load_checkpoint, load_dataset, load_sequence, read_metrics_csv, save_checkpoint, write_metrics_csv, Checkpoint,
};
use vortexlab::model::{config_from_checkpoint, init_params, predict_centers, ModelConfig};
use vortexlab::rng::{derive_seed, tag};
use vortexlab::sim::{generate_dataset, DatasetManifest, SimConfig};
use vortexlab_tensor::ParameterStore;

use crate::config::FlatConfig;
use crate::error::CliError;
use crate::svg;
use crate::{Command, Common, THREADS_ENV};

type Result<T> = std::result::Result<T, CliError>;

pub const RESOLVED_CONFIG: &str = "resolved_config.json";
pub const VERSIONS: &str = "versions.txt";
pub const METRICS: &str = "metrics.csv";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const ENCODER_CKPT: &str = "encoder.vxck";
pub const LOCALIZER_CKPT: &str = "localizer.vxck";
pub const FORECASTER_CKPT: &str = "forecaster.vxck";
pub const EVAL_CSV: &str = "eval.csv";
pub const PROBE_CSV: &str = "probe.csv";

/// Settings common to every command plus the command's own keys.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Run<B> {
    pub command: String,
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,
    #[serde(flatten)]
    pub body: B,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct SimulateBody {
    pub sim: SimConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PretrainBody {
    pub data: Option<PathBuf>,
    pub variant: Variant,
    #[serde(flatten)]
    pub profile: Profile,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FinetuneBody {
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub fraction: f64,
    pub trainable: Trainable,
    #[serde(flatten)]
    pub profile: Profile,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Dbscan,
    Intensity,
    Cv,
    Kalman,
    TrajLstm,
    Supervised,
    Xvortex,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalBody {
    pub data: Option<PathBuf>,
    pub method: Method,
    pub checkpoint: Option<PathBuf>,
    /// Label fraction for the from-scratch supervised model.
    pub fraction: f64,
    pub dbscan: DbscanConfig,
    pub kalman: KalmanConfig,
    #[serde(flatten)]
    pub profile: Profile,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProbeBody {
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    #[serde(flatten)]
    pub profile: Profile,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SuiteBody {
    pub tables: String,
    #[serde(flatten)]
    pub profile: Profile,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlotKind {
    AlignUniform,
    Loss,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PlotBody {
    pub metrics: Option<PathBuf>,
    pub kind: PlotKind,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RenderBody {
    pub data: Option<PathBuf>,
    pub sequence: Option<String>,
    pub frame: Option<usize>,
    pub method: Method,
    pub checkpoint: Option<PathBuf>,
    pub dbscan: DbscanConfig,
    #[serde(flatten)]
    pub profile: Profile,
}

/// What a saved model was trained for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Encoder,
    Localizer,
    Forecaster,
}

/// Metadata stored next to the model config in a checkpoint header.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelMeta {
    pub task: Task,
    pub variant: Variant,
    pub prep: PrepConfig,
}

pub struct SavedModel {
    pub model: ModelConfig,
    pub params: ParameterStore,
    pub meta: ModelMeta,
}

pub fn save_model(
    path: &Path,
    model: &ModelConfig,
    params: &ParameterStore,
    meta: &ModelMeta,
    step: u64,
    seed: u64,
) -> Result<()> {
    let mut hyper = model.hyper_json();
    let extra = serde_json::to_value(meta)?;
    if let (Some(h), Some(e)) = (hyper.as_object_mut(), extra.as_object()) {
        h.extend(e.clone());
    }
    save_checkpoint(path, &Checkpoint { params: params.clone(), hyper, step, seed })?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<SavedModel> {
    let ck = load_checkpoint(path)?;
    let model = config_from_checkpoint(&ck)?;
    let meta: ModelMeta = serde_json::from_value(ck.hyper.clone())
        .map_err(|e| CliError::runtime(format!("{} lacks run metadata: {e}", path.display())))?;
    Ok(SavedModel { model, params: ck.params, meta })
}

fn require<T: Clone>(v: &Option<T>, key: &str) -> Result<T> {
    v.clone().ok_or_else(|| CliError::config(format!("`{key}` is required")))
}

fn flag<T: Serialize>(flags: &mut Vec<(&'static str, Value)>, key: &'static str, v: &Option<T>) {
    if let Some(x) = v {
        flags.push((key, serde_json::to_value(x).expect("flag values serialize")));
    }
}

/// Defaults, then the config file, then `--set`, then flags.
pub fn resolve<B: Serialize + DeserializeOwned>(
    command: &str,
    body: B,
    common: &Common,
    flags: Vec<(&'static str, Value)>,
) -> Result<(Run<B>, FlatConfig)> {
    let defaults = Run { command: command.to_string(), threads: None, out: None, body };
    let mut flat = FlatConfig::from_defaults(&defaults);
    if let Some(p) = &common.config {
        flat.apply_file(p)?;
    }
    flat.apply_sets(&common.set)?;
    for (k, v) in flags {
        flat.set(k, v)?;
    }
    if let Some(o) = &common.out {
        flat.set("out", json!(o))?;
    }
    if let Some(t) = common.threads {
        flat.set("threads", json!(t))?;
    } else if flat.0.get("threads").is_some_and(Value::is_null) {
        if let Ok(raw) = std::env::var(THREADS_ENV) {
            let t: usize = raw
                .trim()
                .parse()
                .map_err(|_| CliError::config(format!("{THREADS_ENV} must be a positive integer, got `{raw}`")))?;
            flat.set("threads", json!(t))?;
        }
    }
    flat.set("command", json!(command))?;
    let run: Run<B> = flat.to_typed()?;
    if run.threads == Some(0) {
        return Err(CliError::config("threads must be at least 1"));
    }
    Ok((run, flat))
}

/// Writes `resolved_config.json` and `versions.txt` into `dir`.
pub fn write_run_files(dir: &Path, flat: &FlatConfig) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(RESOLVED_CONFIG), flat.to_json())?;
    let versions = format!(
        "vortexlab-cli {}\nvortexlab {}\nvortexlab-tensor {}\n",
        env!("CARGO_PKG_VERSION"),
        vortexlab::VERSION,
        vortexlab_tensor::VERSION
    );
    fs::write(dir.join(VERSIONS), versions)?;
    Ok(())
}

fn parent_dir(file: &Path) -> PathBuf {
    match file.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    match threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::runtime(format!("thread pool: {e}")))?
            .install(f),
        None => f(),
    }
}

fn recording_ids(seqs: &[ScanSequence]) -> Vec<String> {
    seqs.iter().map(|s| recording_id(&s.event_id).to_string()).collect()
}

/// Published labels for training and exact labels for scoring. Exact labels
/// come from the oracle sidecar when present, else from the manifests.
pub fn load_labeled(dir: &Path, prep: PrepConfig, seed: u64) -> Result<(LabeledSet, SplitSpec)> {
    let obs = load_dataset(dir)?;
    if obs.is_empty() {
        return Err(CliError::runtime(format!("dataset {} has no sequences", dir.display())));
    }
    if let Some(s) = obs.iter().find(|s| s.centers.is_none() || s.class_id.is_none()) {
        return Err(CliError::runtime(format!(
            "sequence {} has no published labels; simulate the dataset without --unlabeled",
            s.event_id
        )));
    }
    let oracle_path = dir.join(io::ORACLE_DIR).join(io::ORACLE_LABELS);
    let truth = if oracle_path.exists() {
        let labels = io::read_oracle_labels(dir)?;
        obs.iter()
            .map(|s| {
                let l = labels
                    .get(&s.event_id)
                    .ok_or_else(|| CliError::runtime(format!("oracle has no entry for {}", s.event_id)))?;
                Ok(ScanSequence { centers: Some(l.centers.clone()), ..s.clone() })
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        obs.clone()
    };
    let labeled = LabeledSet::from_recordings(&obs, &truth, prep, derive_seed(seed, &[tag::POINT_COUNT, 2]))?;
    let split = split_dataset(&recording_ids(&obs), [0.7, 0.2, 0.1], derive_seed(seed, &[tag::SPLIT, 2]))?;
    Ok((labeled, split))
}

fn train_log_csv(losses: &[f64]) -> String {
    let mut s = String::from("epoch,loss\n");
    for (k, l) in losses.iter().enumerate() {
        s.push_str(&format!("{},{:.9e}\n", k + 1, l));
    }
    s
}

pub fn execute(cmd: Command) -> Result<String> {
    match cmd {
        Command::Simulate { common, n_sequences, n_frames, unlabeled, label_noise } => {
            let mut flags = Vec::new();
            flag(&mut flags, "sim.n_sequences", &n_sequences);
            flag(&mut flags, "sim.n_frames", &n_frames);
            flag(&mut flags, "sim.label_noise_sigma", &label_noise);
            flag(&mut flags, "sim.seed", &common.seed);
            if unlabeled {
                flags.push(("sim.labeled", json!(false)));
            }
            let (run, flat) = resolve("simulate", SimulateBody::default(), &common, flags)?;
            with_threads(run.threads, || simulate(&run, &flat))
        }
        Command::Pretrain { common, profile, data, epochs, batch_size, temperature, variant } => {
            let mut flags = Vec::new();
            flag(&mut flags, "data", &data);
            flag(&mut flags, "pretrain.epochs", &epochs);
            flag(&mut flags, "pretrain.batch_size", &batch_size);
            flag(&mut flags, "pretrain.temperature", &temperature);
            flag(&mut flags, "variant", &variant);
            flag(&mut flags, "seed", &common.seed);
            let body = PretrainBody { data: None, variant: Variant::Full, profile: profile.profile.profile() };
            let (run, flat) = resolve("pretrain", body, &common, flags)?;
            with_threads(run.threads, || pretrain_cmd(&run, &flat))
        }
        Command::Finetune { common, profile, data, checkpoint, fraction, trainable } => {
            let mut flags = Vec::new();
            flag(&mut flags, "data", &data);
            flag(&mut flags, "checkpoint", &checkpoint);
            flag(&mut flags, "fraction", &fraction);
            flag(&mut flags, "trainable", &trainable);
            flag(&mut flags, "seed", &common.seed);
            let body = FinetuneBody {
                data: None,
                checkpoint: None,
                fraction: 1.0,
                trainable: Trainable::FrozenEncoder,
                profile: profile.profile.profile(),
            };
            let (run, flat) = resolve("finetune", body, &common, flags)?;
            with_threads(run.threads, || finetune_cmd(&run, &flat, Task::Localizer))
        }
        Command::ForecastTrain { common, profile, data, checkpoint, trainable } => {
            let mut flags = Vec::new();
            flag(&mut flags, "data", &data);
            flag(&mut flags, "checkpoint", &checkpoint);
            flag(&mut flags, "trainable", &trainable);
            flag(&mut flags, "seed", &common.seed);
            let body = FinetuneBody {
                data: None,
                checkpoint: None,
                fraction: 1.0,
                trainable: Trainable::HeadsOnly,
                profile: profile.profile.profile(),
            };
            let (run, flat) = resolve("forecast-train", body, &common, flags)?;
            with_threads(run.threads, || finetune_cmd(&run, &flat, Task::Forecaster))
        }
        Command::Eval { common, profile, data, method, checkpoint } => {
            let mut flags = Vec::new();
            flag(&mut flags, "data", &data);
            flag(&mut flags, "method", &method);
            flag(&mut flags, "checkpoint", &checkpoint);
            flag(&mut flags, "seed", &common.seed);
            let body = EvalBody {
                data: None,
                method: Method::Xvortex,
                checkpoint: None,
                fraction: 1.0,
                dbscan: DbscanConfig::default(),
                kalman: KalmanConfig::default(),
                profile: profile.profile.profile(),
            };
            let (run, flat) = resolve("eval", body, &common, flags)?;
            with_threads(run.threads, || eval_cmd(&run, &flat))
        }
        Command::Probe { common, profile, data, checkpoint } => {
            let mut flags = Vec::new();
            flag(&mut flags, "data", &data);
            flag(&mut flags, "checkpoint", &checkpoint);
            flag(&mut flags, "seed", &common.seed);
            let body = ProbeBody { data: None, checkpoint: None, profile: profile.profile.profile() };
            let (run, flat) = resolve("probe", body, &common, flags)?;
            with_threads(run.threads, || probe_cmd(&run, &flat))
        }
        Command::Ablate { common, profile } => {
            let mut flags = Vec::new();
            flag(&mut flags, "seed", &common.seed);
            let body = SuiteBody { tables: "4".into(), profile: profile.profile.profile() };
            let (run, flat) = resolve("ablate", body, &common, flags)?;
            with_threads(run.threads, || suite_cmd(&run, &flat))
        }
        Command::Table { common, profile, tables } => {
            let mut flags = Vec::new();
            flag(&mut flags, "tables", &tables);
            flag(&mut flags, "seed", &common.seed);
            let body = SuiteBody { tables: "1,2,3,4".into(), profile: profile.profile.profile() };
            let (run, flat) = resolve("table", body, &common, flags)?;
            with_threads(run.threads, || suite_cmd(&run, &flat))
        }
        Command::Plot { common, metrics, kind } => {
            let mut flags = Vec::new();
            flag(&mut flags, "metrics", &metrics);
            flag(&mut flags, "kind", &kind);
            let body = PlotBody { metrics: None, kind: PlotKind::AlignUniform };
            let (run, flat) = resolve("plot", body, &common, flags)?;
            plot_cmd(&run, &flat)
        }
        Command::Render { common, profile, data, sequence, frame, method, checkpoint } => {
            let mut flags = Vec::new();
            flag(&mut flags, "data", &data);
            flag(&mut flags, "sequence", &sequence);
            flag(&mut flags, "frame", &frame);
            flag(&mut flags, "method", &method);
            flag(&mut flags, "checkpoint", &checkpoint);
            flag(&mut flags, "seed", &common.seed);
            let body = RenderBody {
                data: None,
                sequence: None,
                frame: None,
                method: Method::Intensity,
                checkpoint: None,
                dbscan: DbscanConfig::default(),
                profile: profile.profile.profile(),
            };
            let (run, flat) = resolve("render", body, &common, flags)?;
            with_threads(run.threads, || render_cmd(&run, &flat))
        }
    }
}

fn simulate(run: &Run<SimulateBody>, flat: &FlatConfig) -> Result<String> {
    let out = require(&run.out, "out")?;
    write_run_files(&out, flat)?;
    let m = generate_dataset(&run.body.sim, &out)?;
    Ok(json!({"command": "simulate", "sequences": m.n_sequences, "labeled": m.labeled, "out": out}).to_string())
}

fn pretrain_cmd(run: &Run<PretrainBody>, flat: &FlatConfig) -> Result<String> {
    let out = require(&run.out, "out")?;
    let data = require(&run.body.data, "data")?;
    write_run_files(&out, flat)?;
    let p = &run.body.profile;
    let v = run.body.variant;
    let recs = load_dataset(&data)?;
    let prep = v.prep(p.prep);
    let seqs = prepare_sequences(&recs, prep, derive_seed(p.seed, &[tag::POINT_COUNT, 1]))?;
    let split = split_dataset(&recording_ids(&recs), [0.7, 0.2, 0.1], derive_seed(p.seed, &[tag::SPLIT, 1]))?;
    io::write_json(&out.join("split.json"), &split)?;
    let train = select_by_recording(&seqs, &split.train);
    let val = select_by_recording(&seqs, &split.val);
    let model = v.model(&p.model);
    let cfg = PretrainConfig { augment: v.augment(&p.pretrain.augment, prep.sequence_len), seed: p.seed, ..p.pretrain.clone() };
    let metrics_path = out.join(METRICS);
    let mut log_err = None;
    let outcome = pretrain(&train, &val, &model, &cfg, None, |m| {
        if let Err(e) = write_metrics_csv(&metrics_path, m) {
            log_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = log_err {
        return Err(e.into());
    }
    write_metrics_csv(&metrics_path, &outcome.metrics)?;
    let meta = ModelMeta { task: Task::Encoder, variant: v, prep };
    save_model(&out.join(ENCODER_CKPT), &model, &outcome.params, &meta, outcome.steps, p.seed)?;
    let last = outcome.metrics.iter().rev().find(|r| r.split == "train").map(|r| r.loss);
    Ok(json!({
        "command": "pretrain",
        "epochs_run": outcome.epochs_run,
        "best_epoch": outcome.best_epoch,
        "final_train_loss": last,
        "checkpoint": out.join(ENCODER_CKPT),
    })
    .to_string())
}

fn finetune_cmd(run: &Run<FinetuneBody>, flat: &FlatConfig, task: Task) -> Result<String> {
    let out = require(&run.out, "out")?;
    let data = require(&run.body.data, "data")?;
    let ckpt = require(&run.body.checkpoint, "checkpoint")?;
    write_run_files(&out, flat)?;
    let p = &run.body.profile;
    let saved = load_model(&ckpt)?;
    let (labeled, split) = load_labeled(&data, saved.meta.prep, p.seed)?;
    let trainable = run.body.trainable;
    let (outcome, val_rmse, name) = match task {
        Task::Localizer => {
            let o = fit_localizer(p, &saved.model, saved.params, trainable, &labeled, &split, run.body.fraction, p.seed)?;
            let v = score_localizer(&o.params, &saved.model, &labeled, &split.val)?;
            (o, json!({"center_rmse": v}), LOCALIZER_CKPT)
        }
        _ => {
            let train = ForecastSet::select(&labeled, &split.train)?;
            let o = fit_forecaster(p, &saved.model, saved.params, trainable, &train, p.seed)?;
            let v = score_forecaster(&o.params, &saved.model, &ForecastSet::select(&labeled, &split.val)?)?;
            (o, json!({"rmse_t1": v[0], "rmse_t2": v[1]}), FORECASTER_CKPT)
        }
    };
    fs::write(out.join(TRAIN_LOG), train_log_csv(&outcome.epoch_losses))?;
    let meta = ModelMeta { task, ..saved.meta };
    save_model(&out.join(name), &saved.model, &outcome.params, &meta, outcome.steps, p.seed)?;
    Ok(json!({"command": run.command, "val": val_rmse, "checkpoint": out.join(name)}).to_string())
}

fn eval_cmd(run: &Run<EvalBody>, flat: &FlatConfig) -> Result<String> {
    let out = require(&run.out, "out")?;
    let data = require(&run.body.data, "data")?;
    write_run_files(&out, flat)?;
    let b = &run.body;
    let p = &b.profile;
    let saved = match (&b.checkpoint, b.method) {
        (Some(c), Method::Xvortex) => Some(load_model(c)?),
        (None, Method::Xvortex) => return Err(CliError::config("`checkpoint` is required for method xvortex")),
        _ => None,
    };
    let prep = saved.as_ref().map_or(p.prep, |s| s.meta.prep);
    let (labeled, split) = load_labeled(&data, prep, p.seed)?;
    let forecast_sets = || -> Result<(ForecastSet, ForecastSet)> {
        Ok((ForecastSet::select(&labeled, &split.train)?, ForecastSet::select(&labeled, &split.test)?))
    };
    let (task, values): (&str, Vec<(&str, f64)>) = match b.method {
        Method::Dbscan => {
            ("localization", vec![("center_rmse", heuristic_rmse(&labeled, &split.test, dbscan_method(b.dbscan))?)])
        }
        Method::Intensity => ("localization", vec![("center_rmse", heuristic_rmse(&labeled, &split.test, intensity_method)?)]),
        Method::Supervised => {
            let init = init_params(&p.model, derive_seed(p.seed, &[tag::INIT, 1]))?;
            let r = localization_rmse(p, &p.model, init, Trainable::All, &labeled, &split, b.fraction, p.seed)?;
            ("localization", vec![("center_rmse", r)])
        }
        Method::Cv => {
            let r = cv_rmse(&forecast_sets()?.1)?;
            ("forecast", vec![("rmse_t1", r[0]), ("rmse_t2", r[1])])
        }
        Method::Kalman => {
            b.kalman.validate()?;
            let r = kalman_rmse(&forecast_sets()?.1, &b.kalman)?;
            ("forecast", vec![("rmse_t1", r[0]), ("rmse_t2", r[1])])
        }
        Method::TrajLstm => {
            let (train, test) = forecast_sets()?;
            let r = trajectory_rmse(p, &train, &test, p.seed)?;
            ("forecast", vec![("rmse_t1", r[0]), ("rmse_t2", r[1])])
        }
        Method::Xvortex => {
            let s = saved.as_ref().expect("loaded above");
            match s.meta.task {
                Task::Localizer => {
                    ("localization", vec![("center_rmse", score_localizer(&s.params, &s.model, &labeled, &split.test)?)])
                }
                Task::Forecaster => {
                    let r = score_forecaster(&s.params, &s.model, &forecast_sets()?.1)?;
                    ("forecast", vec![("rmse_t1", r[0]), ("rmse_t2", r[1])])
                }
                Task::Encoder => {
                    return Err(CliError::config("checkpoint is a pretrained encoder; run finetune or forecast-train first"))
                }
            }
        }
    };
    let method = serde_json::to_value(b.method)?;
    let method = method.as_str().unwrap_or_default();
    let mut csv = String::from("method,task,split,metric,value\n");
    for (m, v) in &values {
        csv.push_str(&format!("{method},{task},test,{m},{v:.6}\n"));
    }
    fs::write(out.join(EVAL_CSV), csv)?;
    let metrics: serde_json::Map<String, Value> = values.iter().map(|(k, v)| (k.to_string(), json!(v))).collect();
    Ok(json!({"command": "eval", "method": method, "task": task, "metrics": metrics}).to_string())
}

fn probe_cmd(run: &Run<ProbeBody>, flat: &FlatConfig) -> Result<String> {
    let out = require(&run.out, "out")?;
    let data = require(&run.body.data, "data")?;
    write_run_files(&out, flat)?;
    let p = &run.body.profile;
    let (model, params, prep, name) = match &run.body.checkpoint {
        Some(c) => {
            let s = load_model(c)?;
            (s.model, s.params, s.meta.prep, c.display().to_string())
        }
        None => (p.model.clone(), init_params(&p.model, p.seed)?, p.prep, "random-init".to_string()),
    };
    let (labeled, split) = load_labeled(&data, prep, p.seed)?;
    let (train, _) = labeled.select(&split.train);
    let held: Vec<String> = split.val.iter().chain(&split.test).cloned().collect();
    let (test, _) = labeled.select(&held);
    let acc = probe_accuracy(p, &model, &params, &train, &test, p.seed)?;
    fs::write(out.join(PROBE_CSV), format!("encoder,accuracy\n{name},{acc:.4}\n"))?;
    Ok(json!({"command": "probe", "encoder": name, "accuracy": acc}).to_string())
}

fn parse_tables(s: &str) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for c in s.chars().filter(|c| !matches!(c, ',' | ' ')) {
        match c {
            '1'..='4' => out.push(c as u8 - b'0'),
            _ => return Err(CliError::config(format!("tables must list numbers 1 to 4, got `{s}`"))),
        }
    }
    if out.is_empty() {
        return Err(CliError::config("tables is empty"));
    }
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

fn suite_cmd(run: &Run<SuiteBody>, flat: &FlatConfig) -> Result<String> {
    let out = require(&run.out, "out")?;
    let tables = parse_tables(&run.body.tables)?;
    write_run_files(&out, flat)?;
    let p = &run.body.profile;
    let data = DeskData::simulate(p)?;
    let suite = Suite::new(p, &data)?;
    let mut full = Vec::new();
    for (k, s) in suite.seeds().into_iter().enumerate() {
        let pre = suite.pretrain(Variant::Full, s)?;
        write_metrics_csv(&out.join(format!("pretrain_metrics_seed{k}.csv")), &pre.metrics)?;
        full.push(pre);
    }
    let mut written = Vec::new();
    for t in tables {
        let (name, csv) = match t {
            1 => (TABLE1, plain_csv(&suite.table1(&full)?)),
            2 => (TABLE2, table2_csv(&suite.table2(&full)?)),
            3 => (TABLE3, plain_csv(&suite.table3(&full)?)),
            _ => (TABLE4, table4_csv(&suite.table4(&full)?)),
        };
        fs::write(out.join(name), csv)?;
        written.push(out.join(name));
    }
    Ok(json!({"command": run.command, "config_hash": p.config_hash(), "tables": written}).to_string())
}

fn plot_cmd(run: &Run<PlotBody>, flat: &FlatConfig) -> Result<String> {
    let out = require(&run.out, "out")?;
    let metrics = require(&run.body.metrics, "metrics")?;
    write_run_files(&parent_dir(&out), flat)?;
    let records = read_metrics_csv(&metrics)?;
    let svg = match run.body.kind {
        PlotKind::AlignUniform => svg::align_uniform(&records)?,
        PlotKind::Loss => svg::loss_curves(&records)?,
    };
    fs::write(&out, svg)?;
    Ok(json!({"command": "plot", "out": out}).to_string())
}

fn render_cmd(run: &Run<RenderBody>, flat: &FlatConfig) -> Result<String> {
    let out = require(&run.out, "out")?;
    let data = require(&run.body.data, "data")?;
    write_run_files(&parent_dir(&out), flat)?;
    let b = &run.body;
    let p = &b.profile;
    let id = match &b.sequence {
        Some(s) => s.clone(),
        None => {
            let m: DatasetManifest = io::read_json(&data.join(io::DATASET_MANIFEST))?;
            m.sequences.first().cloned().ok_or_else(|| CliError::runtime("dataset has no sequences"))?
        }
    };
    let rec = load_sequence(&data.join(&id))?;
    let k = b.frame.unwrap_or(p.prep.sequence_len.min(rec.len()).saturating_sub(1));
    let frame = rec
        .frames
        .get(k)
        .ok_or_else(|| CliError::config(format!("frame {k} is out of range for {id} ({} frames)", rec.len())))?;
    let oracle_path = data.join(io::ORACLE_DIR).join(io::ORACLE_LABELS);
    let truth_seq: Option<Vec<CenterPair>> =
        if oracle_path.exists() { io::read_oracle_labels(&data)?.remove(&id).map(|l| l.centers) } else { rec.centers.clone() };
    let truth = truth_seq
        .and_then(|c| c.get(k).copied())
        .ok_or_else(|| CliError::runtime(format!("no ground-truth centers for {id} frame {k}")))?;
    let pred = match b.method {
        Method::Dbscan => dbscan_centers(frame, &b.dbscan),
        Method::Intensity => intensity_centroid(frame),
        Method::Xvortex => {
            let ckpt = require(&b.checkpoint, "checkpoint")?;
            let s = load_model(&ckpt)?;
            if s.meta.task != Task::Localizer {
                return Err(CliError::config("render with xvortex needs a localizer checkpoint from finetune"));
            }
            let t = s.meta.prep.sequence_len;
            if k + 1 < t {
                return Err(CliError::config(format!(
                    "xvortex needs {t} frames ending at the rendered frame; pick frame >= {}",
                    t - 1
                )));
            }
            let window = rec.select_frames(&(k + 1 - t..=k).collect::<Vec<_>>());
            let seqs = prepare_sequences(&[window], s.meta.prep, derive_seed(p.seed, &[tag::POINT_COUNT, 4]))?;
            let pred = predict_centers(&s.params, &s.model, &[&seqs[0]], 1)?[0];
            let o = seqs[0].centroid_removed;
            pred.map(|c| [c[0] + o[0], c[1] + o[1]])
        }
        m => return Err(CliError::config(format!("render supports dbscan, intensity and xvortex, not {m:?}"))),
    };
    let method = serde_json::to_value(b.method)?;
    let title = format!("{id} frame {k} ({})", method.as_str().unwrap_or_default());
    let svg = svg::render_frame(&title, frame, &truth, &pred)?;
    fs::write(&out, svg)?;
    Ok(json!({"command": "render", "sequence": id, "frame": k, "out": out}).to_string())
}
