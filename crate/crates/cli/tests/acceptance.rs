//! Acceptance suite. Prints one verdict line per criterion to stderr.
//!
//! `VORTEXLAB_ACCEPTANCE_SCALE=full` runs the desk-scale profile instead of
//! the reduced one. Exact and structural criteria always assert; the
//! empirical orderings (5 to 9) only panic on FAIL when
//! `VORTEXLAB_ACCEPTANCE_STRICT=1`.

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use vortexlab::augment::{make_view_pair, AugmentConfig};
use vortexlab::baselines::{constant_velocity_forecast, kalman_forecast, KalmanConfig};
use vortexlab::contrastive::{contrastive_forward, info_nce, info_nce_loss, uniformity};
use vortexlab::data::{CenterPair, PointCloudFrame, ScanSequence};
use vortexlab::eval::rmse_centers;
use vortexlab::experiments::{
    DeskData, Pretrained, Profile, Suite, Variant, METHOD_CV, METHOD_DBSCAN, METHOD_INTENSITY, METHOD_KALMAN, METHOD_RANDOM,
    METHOD_SCRATCH, METHOD_XVORTEX,
};
use vortexlab::finetune::assignment_loss;
use vortexlab::model::{init_params, Aggregator, Batch, ModelConfig, Network, CENTER};
use vortexlab::sim::{advance_vortex_state, in_ground_effect, sample_scenario, CatalogConfig, Scenario};
use vortexlab_tensor::nn::{lstm_cell, mse, LstmWeights};
use vortexlab_tensor::{finite_diff_check, Graph, ParameterStore, Tensor, Var};

const SCALE_ENV: &str = "VORTEXLAB_ACCEPTANCE_SCALE";
const STRICT_ENV: &str = "VORTEXLAB_ACCEPTANCE_STRICT";

fn say(line: &str) {
    let _ = writeln!(std::io::stderr().lock(), "{line}");
}

/// Prints the verdict line; panics on FAIL when `hard` or in strict mode.
fn verdict(id: u32, name: &str, pass: bool, detail: &str, hard: bool) {
    let word = if pass { "PASS" } else { "FAIL" };
    say(&format!("[acceptance] criterion {id:>2} {word} {name}: {detail}"));
    let strict = std::env::var(STRICT_ENV).is_ok_and(|v| v == "1");
    if !pass && (hard || strict) {
        panic!("criterion {id} ({name}) failed: {detail}");
    }
}

struct Bench {
    suite: Suite<'static>,
    full: Vec<Pretrained>,
    first_pretrain: Duration,
}

fn profile() -> &'static Profile {
    static PROFILE: OnceLock<Profile> = OnceLock::new();
    PROFILE.get_or_init(|| match std::env::var(SCALE_ENV).as_deref() {
        Ok("full") => Profile::default(),
        _ => Profile::reduced(),
    })
}

/// Simulated benchmark and the full-model encoders of every seed, shared by
/// criteria 5 to 9.
fn bench() -> &'static Bench {
    static DATA: OnceLock<DeskData> = OnceLock::new();
    static BENCH: OnceLock<Bench> = OnceLock::new();
    BENCH.get_or_init(|| {
        let p = profile();
        let t0 = Instant::now();
        let data = DATA.get_or_init(|| DeskData::simulate(p).expect("benchmark simulates"));
        let suite = Suite::new(p, data).expect("benchmark prepares");
        say(&format!("[acceptance] benchmark simulated and prepared in {:.1?}", t0.elapsed()));
        let mut full = Vec::new();
        let mut first_pretrain = None;
        for seed in suite.seeds() {
            let t = Instant::now();
            full.push(suite.pretrain(Variant::Full, seed).expect("pretraining runs"));
            first_pretrain.get_or_insert(t.elapsed());
        }
        say(&format!("[acceptance] {} full-model encoders pretrained in {:.1?}", full.len(), t0.elapsed()));
        Bench { suite, full, first_pretrain: first_pretrain.expect("at least one seed") }
    })
}

fn fmt_vals(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.2}")).collect::<Vec<_>>().join("/")
}

fn random_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::new(vec![r, c], (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn project_to_scalar(g: &mut Graph, x: Var, rng_seed: u64) -> Var {
    let t = g.value(x).clone();
    let w = random_tensor(&mut ChaCha8Rng::seed_from_u64(rng_seed), t.rows(), t.cols());
    let w = g.constant(w);
    let p = g.mul(x, w);
    g.sum(p)
}

fn random_sequence(rng: &mut ChaCha8Rng, id: &str, frames: usize, points: usize) -> ScanSequence {
    ScanSequence {
        event_id: id.into(),
        frames: (0..frames)
            .map(|k| PointCloudFrame {
                timestamp: 5.0 * k as f64,
                points: (0..points)
                    .map(|_| [rng.gen_range(-60.0..60.0), rng.gen_range(-60.0..60.0), rng.gen_range(-4.0..4.0)])
                    .collect(),
            })
            .collect(),
        class_id: Some(0),
        centers: None,
        centroid_removed: [0.0, 0.0],
    }
}

/// Central differences over every parameter coordinate of a bound network.
fn model_gradcheck(cfg: &ModelConfig, params: &ParameterStore, loss: impl Fn(&mut Graph, &Network) -> Var) -> f64 {
    const EPS: f64 = 1e-6;
    let mut g = Graph::new();
    let net = Network::bind(&mut g, params, cfg, |_| true);
    let l = loss(&mut g, &net);
    let analytic = g.param_grads(&g.backward(l).unwrap());
    let value = |p: &ParameterStore| {
        let mut g = Graph::new();
        let net = Network::bind_frozen(&mut g, p, cfg);
        let l = loss(&mut g, &net);
        g.value(l).item()
    };
    let mut worst = 0.0f64;
    let mut probe = params.clone();
    for (name, t) in params.iter() {
        for k in 0..t.numel() {
            let orig = t.data()[k];
            probe.get_mut(name).unwrap().data_mut()[k] = orig + EPS;
            let plus = value(&probe);
            probe.get_mut(name).unwrap().data_mut()[k] = orig - EPS;
            let minus = value(&probe);
            probe.get_mut(name).unwrap().data_mut()[k] = orig;
            let a = analytic[name].data()[k];
            worst = worst.max((a - (plus - minus) / (2.0 * EPS)).abs() / a.abs().max(1.0));
        }
    }
    worst
}

#[test]
fn c01_gradient_suite() {
    const EPS: f64 = 1e-6;
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut errors: Vec<(&str, f64)> = Vec::new();
    let x = random_tensor(&mut rng, 6, 4);
    let mut prim = |name: &'static str, point: Vec<Tensor>, f: &dyn Fn(&mut Graph, &[Var]) -> Var| {
        errors.push((name, finite_diff_check(f, &point, EPS).unwrap()));
    };
    prim("linear", vec![x.clone(), random_tensor(&mut rng, 4, 3), random_tensor(&mut rng, 1, 3)], &|g, v| {
        let y = g.linear(v[0], v[1], v[2]);
        project_to_scalar(g, y, 1)
    });
    prim("relu", vec![x.clone()], &|g, v| {
        let y = g.relu(v[0]);
        project_to_scalar(g, y, 2)
    });
    prim("tanh/sigmoid", vec![x.clone()], &|g, v| {
        let a = g.tanh(v[0]);
        let b = g.sigmoid(a);
        project_to_scalar(g, b, 3)
    });
    prim("max-pool", vec![x.clone()], &|g, v| {
        let y = g.segment_max(v[0], &[0..2, 2..6]);
        project_to_scalar(g, y, 4)
    });
    prim("mean-pool", vec![x.clone()], &|g, v| {
        let y = g.segment_mean(v[0], &[0..3, 3..6]);
        project_to_scalar(g, y, 5)
    });
    prim("l2-normalize", vec![x.clone()], &|g, v| {
        let y = g.l2_normalize_rows(v[0], 1e-12);
        project_to_scalar(g, y, 6)
    });
    prim("log-sum-exp", vec![x.clone()], &|g, v| {
        let y = g.logsumexp_rows(v[0], Some(&[0, 1, 2, 3, 0, 1]));
        project_to_scalar(g, y, 7)
    });
    prim("weighted centroid", vec![x.clone().map(|v| v.abs() + 0.1), random_tensor(&mut rng, 6, 2)], &|g, v| {
        let c = g.weighted_centroid(v[0], v[1], &[0..4, 4..6], 1e-12);
        project_to_scalar(g, c, 8)
    });
    let (b, i, h) = (3, 4, 5);
    let lstm_point = vec![
        random_tensor(&mut rng, b, i),
        random_tensor(&mut rng, b, h),
        random_tensor(&mut rng, b, h),
        random_tensor(&mut rng, i, 4 * h),
        random_tensor(&mut rng, h, 4 * h),
        random_tensor(&mut rng, 1, 4 * h),
    ];
    prim("lstm cell", lstm_point, &|g, v| {
        let (hn, cn) = lstm_cell(g, v[0], v[1], v[2], LstmWeights { w_ih: v[3], w_hh: v[4], bias: v[5] });
        let both = g.concat_cols(&[hn, cn]);
        project_to_scalar(g, both, 9)
    });
    prim("info_nce", vec![random_tensor(&mut rng, 8, 6)], &|g, v| {
        let z = g.l2_normalize_rows(v[0], 1e-12);
        info_nce_loss(g, z, 0.07).unwrap()
    });

    let cfg = |aggregator| ModelConfig {
        point_widths: vec![3, 8, 12],
        hidden: 5,
        proj_widths: vec![8, 6],
        center_hidden: 5,
        forecast_hidden: 5,
        aggregator,
        ..Default::default()
    };
    let lstm = cfg(Aggregator::Lstm);
    let params = init_params(&lstm, 2).unwrap();
    let seqs: Vec<ScanSequence> = (0..3).map(|k| random_sequence(&mut rng, &format!("s{k}"), 3, 9)).collect();
    let refs: Vec<&ScanSequence> = seqs.iter().collect();
    let batch = Batch::new(&refs, &lstm).unwrap();
    let labels: Vec<CenterPair> =
        (0..3).map(|_| [[rng.gen_range(-20.0..20.0), 5.0], [rng.gen_range(-20.0..20.0), -5.0]]).collect();
    errors.push((
        "soft-center head",
        model_gradcheck(&lstm, &params, |g, net| {
            let enc = net.encode(g, &batch);
            let h = net.aggregate(g, enc.frame_features, &batch);
            let (_, centers) = net.soft_center(g, &enc, h, &batch);
            assignment_loss(g, centers, &labels)
        }),
    ));
    let target = random_tensor(&mut rng, 3, 8).map(|v| 30.0 * v);
    errors.push((
        "forecast head",
        model_gradcheck(&lstm, &params, |g, net| {
            let enc = net.encode(g, &batch);
            let h = net.aggregate(g, enc.frame_features, &batch);
            let pred = net.forecast(g, h);
            let y = g.constant(target.clone());
            mse(g, pred, y)
        }),
    ));
    let aug = AugmentConfig { min_frames_kept: 2, ..Default::default() };
    for (name, aggregator) in
        [("pretraining loss (lstm)", Aggregator::Lstm), ("pretraining loss (mean-pool)", Aggregator::MeanPool)]
    {
        let c = cfg(aggregator);
        let params = init_params(&c, 3).unwrap();
        let pairs: Vec<_> = (0..3)
            .map(|k| make_view_pair(&random_sequence(&mut rng, &format!("p{k}"), 4, 10), &mut rng, &aug).unwrap())
            .collect();
        errors.push((name, model_gradcheck(&c, &params, |g, net| contrastive_forward(g, net, &pairs, 0.07).unwrap().0)));
    }
    let elapsed = t0.elapsed();
    let (worst_name, worst) = errors.iter().copied().fold(("", 0.0), |a, b| if b.1 > a.1 { b } else { a });
    let pass = worst < 1e-5 && elapsed < Duration::from_secs(120);
    verdict(
        1,
        "gradient suite",
        pass,
        &format!("{} checks, max relative error {worst:.2e} ({worst_name}), {elapsed:.1?} (limit 1e-5, 2 min)", errors.len()),
        true,
    );
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn in_hull(points: &[[f64; 2]], q: [f64; 2]) -> bool {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() < 3 {
        return true;
    }
    let cross = |o: [f64; 2], a: [f64; 2], b: [f64; 2]| (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]);
    let mut hull: Vec<[f64; 2]> = Vec::new();
    for pass in 0..2 {
        let start = hull.len();
        let order: Vec<[f64; 2]> = if pass == 0 { pts.clone() } else { pts.iter().rev().copied().collect() };
        for p in order {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    (0..hull.len()).all(|i| {
        let (a, b) = (hull[i], hull[(i + 1) % hull.len()]);
        let len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
        cross(a, b, q) / len >= -1e-9
    })
}

#[test]
fn c02_exact_invariants() {
    let p = profile();
    let cfg = &p.model;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut failures = Vec::new();

    let mut bitwise = true;
    let mut hull = true;
    let mut centroid_err = 0.0f64;
    for trial in 0..10u64 {
        let params = init_params(cfg, trial).unwrap();
        let seq = random_sequence(&mut rng, "x", 1, p.prep.n_points);
        let mut shuffled = seq.clone();
        shuffled.frames[0].points.shuffle(&mut rng);
        let features = |s: &ScanSequence| {
            let batch = Batch::new(&[s], cfg).unwrap();
            let mut g = Graph::new();
            let net = Network::bind_frozen(&mut g, &params, cfg);
            let enc = net.encode(&mut g, &batch);
            g.value(enc.frame_features).data().iter().map(|v| v.to_bits()).collect::<Vec<u64>>()
        };
        bitwise &= features(&seq) == features(&shuffled);

        let centers = |params: &ParameterStore| {
            let batch = Batch::new(&[&seq], cfg).unwrap();
            let mut g = Graph::new();
            let net = Network::bind_frozen(&mut g, params, cfg);
            let enc = net.encode(&mut g, &batch);
            let h = net.aggregate(&mut g, enc.frame_features, &batch);
            let (_, c) = net.soft_center(&mut g, &enc, h, &batch);
            g.value(c).row_slice(0).to_vec()
        };
        let yz: Vec<[f64; 2]> = seq.frames[0].points.iter().map(|q| [q[0], q[1]]).collect();
        let c = centers(&params);
        hull &= in_hull(&yz, [c[0], c[1]]) && in_hull(&yz, [c[2], c[3]]);
        let mut flat = params.clone();
        let names: Vec<String> = flat.names().filter(|n| n.starts_with(CENTER)).cloned().collect();
        for n in names {
            let fill = if n == format!("{CENTER}1.bias") { rng.gen_range(-3.0..3.0) } else { 0.0 };
            flat.get_mut(&n).unwrap().data_mut().iter_mut().for_each(|v| *v = fill);
        }
        let c = centers(&flat);
        let m = seq.frames[0].centroid();
        centroid_err = centroid_err.max((0..4).map(|k| (c[k] - m[k % 2]).abs()).fold(0.0, f64::max));
    }
    if !bitwise {
        failures.push("permutation invariance".to_string());
    }
    if !hull {
        failures.push("soft center outside convex hull".to_string());
    }
    if centroid_err >= 1e-9 {
        failures.push(format!("uniform-mask centroid error {centroid_err:e}"));
    }

    let a = unit((0..16).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let b = unit((0..16).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let pair = Tensor::new(vec![2, 16], [a.clone(), b].concat()).unwrap();
    let single = info_nce(&pair, 0.07).unwrap();
    if single != 0.0 {
        failures.push(format!("info_nce with B=1 is {single}"));
    }
    let same = uniformity(&Tensor::new(vec![5, 16], a.repeat(5)).unwrap()).unwrap();
    if same != 0.0 {
        failures.push(format!("identical uniformity {same}"));
    }
    let neg: Vec<f64> = a.iter().map(|v| -v).collect();
    let anti = uniformity(&Tensor::new(vec![2, 16], [a.clone(), neg].concat()).unwrap()).unwrap();
    if (anti + 8.0).abs() > 1e-9 {
        failures.push(format!("antipodal uniformity {anti}"));
    }
    let label: CenterPair = [[10.0, 120.0], [-30.0, 118.0]];
    let pred: CenterPair = [[13.0, 124.0], [-27.0, 122.0]];
    let r = rmse_centers(&[pred], &[label]).unwrap();
    if (r - 5.0).abs() > 1e-12 {
        failures.push(format!("rmse of (3,4) offset {r}"));
    }
    let detail = format!(
        "bitwise permutation {bitwise}, in hull {hull}, uniform-mask error {centroid_err:.1e}, B=1 loss {single}, \
         identical uniformity {same}, antipodal {anti}, rmse {r}"
    );
    verdict(2, "exact invariants", failures.is_empty(), &if failures.is_empty() { detail } else { failures.join("; ") }, true);
}

#[test]
fn c03_info_nce_calibration() {
    let (b, d, tau, trials) = (32, 512, 0.07, 100);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut total = 0.0;
    for _ in 0..trials {
        let rows: Vec<f64> = (0..2 * b).flat_map(|_| unit((0..d).map(|_| StandardNormal.sample(&mut rng)).collect())).collect();
        total += info_nce(&Tensor::new(vec![2 * b, d], rows).unwrap(), tau).unwrap();
    }
    let mean = total / trials as f64;
    let target = ((2 * b - 1) as f64).ln();
    let rel = (mean - target).abs() / target;
    verdict(
        3,
        "InfoNCE calibration",
        rel < 0.1,
        &format!("B={b}, d={d}, tau={tau}: mean {mean:.4} vs ln 63 = {target:.4} ({:.1}% off, limit 10%)", 100.0 * rel),
        true,
    );
}

#[test]
fn c04_simulator_physics() {
    let calm = |gamma: f64, wingspan: f64, height: f64| Scenario {
        class_id: 0,
        wingspan,
        initial_circulation: gamma,
        initial_height: height,
        lateral_offset: 0.0,
        crosswind: 0.0,
        decay_time_constant: 1e12,
        turbulence_noise_sigma: 0.0,
        frame_interval: 5.0,
        n_frames: 5,
        core_radius: 0.08 * wingspan,
        first_scan_age: 0.0,
        site_offset: [0.0, 0.0],
    };
    let mut worst_rate = 0.0f64;
    for (gamma, wingspan) in [(180.0, 24.0), (330.0, 36.0), (500.0, 60.0), (650.0, 80.0)] {
        let sc = calm(gamma, wingspan, 3000.0);
        let expected = gamma / (2.0 * PI * sc.initial_separation());
        let s0 = sc.rollup_state();
        let s1 = advance_vortex_state(&s0, 2.0, &sc).unwrap();
        worst_rate = worst_rate.max(((s0.z_port - s1.z_port) / 2.0 - expected).abs() / expected);
    }
    let mut monotone = true;
    for (gamma, wingspan, height) in [(500.0, 60.0, 40.0), (650.0, 80.0, 60.0), (180.0, 24.0, 15.0)] {
        let sc = calm(gamma, wingspan, height);
        let mut s = sc.rollup_state();
        for _ in 0..100 {
            let next = advance_vortex_state(&s, 1.0, &sc).unwrap();
            let (before, after) = (s.y_port - s.y_star, next.y_port - next.y_star);
            if after < before - 1e-9 || (in_ground_effect(&s, wingspan) && after <= before) {
                monotone = false;
            }
            s = next;
        }
    }
    let mut min_z = f64::INFINITY;
    let low = CatalogConfig { initial_height: [10.0, 60.0], ..Default::default() };
    for catalog in [CatalogConfig::default(), low] {
        for seed in 0..50 {
            let sc = sample_scenario(seed, &catalog, 100).unwrap();
            let mut s = sc.trajectory().unwrap()[0];
            for _ in 0..100 {
                s = advance_vortex_state(&s, sc.frame_interval, &sc).unwrap();
                min_z = min_z.min(s.z_port.min(s.z_star));
            }
        }
    }
    let pass = worst_rate < 0.01 && monotone && min_z > 0.0;
    verdict(
        4,
        "simulator physics",
        pass,
        &format!(
            "descent-rate error {:.3}% (limit 1%), near-ground separation monotone {monotone}, min z over 2x50x100 steps {min_z:.2} m",
            100.0 * worst_rate
        ),
        true,
    );
}

#[test]
fn c05_pretraining_health() {
    let b = bench();
    let cfg = &profile().pretrain;
    let mut checks = Vec::new();
    let mut pass = cfg.epochs == 20 && cfg.batch_size == 16 && cfg.temperature == 0.07;
    for pre in &b.full {
        let split = |s: &str| pre.metrics.iter().filter(|m| m.split == s).collect::<Vec<_>>();
        let (train, val) = (split("train"), split("val"));
        let (t1, tn) = (train.first().unwrap(), train.last().unwrap());
        let (v1, vn) = (val.first().unwrap(), val.last().unwrap());
        let ok = tn.epoch == 20 && vn.epoch == 20 && tn.loss < 0.5 * t1.loss && vn.uniformity < v1.uniformity;
        pass &= ok;
        checks.push(format!(
            "train loss {:.3}->{:.3}, val uniformity {:.3}->{:.3} (epochs {}..{})",
            t1.loss, tn.loss, v1.uniformity, vn.uniformity, t1.epoch, tn.epoch
        ));
    }
    let within = b.first_pretrain <= Duration::from_secs(20 * 60);
    pass &= within;
    verdict(
        5,
        "pretraining health",
        pass,
        &format!("{}; one 20-epoch run took {:.1?} (limit 20 min)", checks.join("; "), b.first_pretrain),
        false,
    );
}

fn medians(report: &vortexlab::experiments::ExperimentReport, method: &str, setting: &str, metric: &str) -> (f64, Vec<f64>) {
    let row = report.row(method, setting).unwrap_or_else(|| panic!("missing row {method} / {setting}"));
    let vals = row.values.iter().find(|(m, _)| m == metric).unwrap().1.clone();
    (row.median_of(metric).unwrap(), vals)
}

#[test]
fn c06_probe_ordering() {
    let b = bench();
    let r = b.suite.table1(&b.full).unwrap();
    let (random, rv) = medians(&r, METHOD_RANDOM, "sequence", "accuracy");
    let (ours, ov) = medians(&r, METHOD_XVORTEX, "sequence", "accuracy");
    verdict(
        6,
        "probe ordering",
        ours >= random + 15.0,
        &format!(
            "pretrained {ours:.2}% ({}) vs random-init {random:.2}% ({}), gap {:.2} points (need >= 15)",
            fmt_vals(&ov),
            fmt_vals(&rv),
            ours - random
        ),
        false,
    );
}

#[test]
fn c07_label_efficiency() {
    let b = bench();
    let r = b.suite.table2(&b.full).unwrap();
    let settings: Vec<String> = profile().fractions.iter().map(|f| format!("{}%", f * 100.0)).collect();
    let one = settings.iter().find(|s| s.as_str() == "1%").expect("profile includes the 1% fraction");
    let (ours, ov) = medians(&r, METHOD_XVORTEX, one, "rmse");
    let (scratch, sv) = medians(&r, METHOD_SCRATCH, one, "rmse");
    let (db, _) = medians(&r, METHOD_DBSCAN, one, "rmse");
    let (inten, _) = medians(&r, METHOD_INTENSITY, one, "rmse");
    let identical = [METHOD_DBSCAN, METHOD_INTENSITY]
        .iter()
        .all(|m| settings.iter().all(|s| r.row(m, s).unwrap().values == r.row(m, one).unwrap().values));
    assert!(identical, "heuristic rows must not depend on the label fraction");
    let pass = ours <= 0.7 * scratch && ours <= db && ours <= inten;
    verdict(
        7,
        "label-efficiency ordering",
        pass,
        &format!(
            "at 1%: X-VORTEX {ours:.2} m ({}) vs 0.7 x scratch {:.2} m (scratch {}), DBSCAN {db:.2} m, intensity {inten:.2} m; \
             heuristic rows identical across fractions {identical}",
            fmt_vals(&ov),
            0.7 * scratch,
            fmt_vals(&sv)
        ),
        false,
    );
}

fn kalman_matches_cv_on_lines() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cfg = KalmanConfig { q: 1e-9, r: 1e-6, velocity_prior_var: 100.0 };
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let dt = rng.gen_range(3.0..8.0);
        let start: [f64; 4] = std::array::from_fn(|_| rng.gen_range(-200.0..200.0));
        let vel: [f64; 4] = std::array::from_fn(|_| rng.gen_range(-5.0..5.0));
        let n = rng.gen_range(3..6);
        let times: Vec<f64> = (0..n).map(|k| k as f64 * dt).collect();
        let history: Vec<CenterPair> = times
            .iter()
            .map(|t| [[start[0] + vel[0] * t, start[1] + vel[1] * t], [start[2] + vel[2] * t, start[3] + vel[3] * t]])
            .collect();
        let (kf, _) = kalman_forecast(&history, &times, &cfg).unwrap();
        let cv = constant_velocity_forecast(&history).unwrap();
        for h in 0..2 {
            for v in 0..2 {
                for d in 0..2 {
                    worst = worst.max((kf[h][v][d] - cv[h][v][d]).abs());
                }
            }
        }
    }
    worst
}

#[test]
fn c08_forecast_ordering() {
    let b = bench();
    let r = b.suite.table3(&b.full).unwrap();
    let mut parts = Vec::new();
    let mut pass = true;
    for metric in ["rmse_t1", "rmse_t2"] {
        let (ours, ov) = medians(&r, METHOD_XVORTEX, "", metric);
        let (cv, _) = medians(&r, METHOD_CV, "", metric);
        let (kf, _) = medians(&r, METHOD_KALMAN, "", metric);
        pass &= ours < cv && ours < kf;
        parts.push(format!("{metric}: X-VORTEX {ours:.2} m ({}) vs CV {cv:.2} m, Kalman {kf:.2} m", fmt_vals(&ov)));
    }
    let gap = kalman_matches_cv_on_lines();
    assert!(gap < 1e-6, "Kalman departs from constant velocity on noiseless lines by {gap:e}");
    parts.push(format!("Kalman vs CV on noiseless lines max gap {gap:.1e} m"));
    verdict(8, "forecast ordering", pass, &parts.join("; "), false);
}

#[test]
fn c09_ablation_ordering() {
    let b = bench();
    let r = b.suite.table4(&b.full).unwrap();
    let full = |m: &str| medians(&r, Variant::Full.label(), "", m).0;
    let (fc, ff) = (full("center_rmse"), full("forecast_t1_rmse"));
    let mut deltas: BTreeMap<&str, (f64, f64)> = BTreeMap::new();
    for v in Variant::ALL.into_iter().filter(|v| *v != Variant::Full) {
        let c = medians(&r, v.label(), "", "center_rmse").0 - fc;
        let f = medians(&r, v.label(), "", "forecast_t1_rmse").0 - ff;
        deltas.insert(v.label(), (c, f));
    }
    let all_nonneg = deltas.values().all(|(c, f)| *c >= 0.0 && *f >= 0.0);
    let mp = deltas[Variant::MeanPooling.label()];
    let worst = deltas.values().all(|(c, f)| mp.0 >= *c && mp.1 >= *f);
    let detail = deltas.iter().map(|(k, (c, f))| format!("{k}: {c:+.2}/{f:+.2}")).collect::<Vec<_>>().join("; ");
    verdict(
        9,
        "ablation ordering",
        all_nonneg && worst,
        &format!("delta center/t+1 m vs full ({fc:.2}/{ff:.2}): {detail}; all >= 0 {all_nonneg}, mean-pool worst {worst}"),
        false,
    );
}

fn files_under(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn run_cli(dir: &Path, args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_vortexlab"))
        .current_dir(dir)
        .args(args)
        .env_remove("VORTEXLAB_THREADS")
        .output()
        .expect("binary runs");
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

/// Every workflow command, run inside `root` with relative paths and
/// `--threads 1` throughout.
fn workflow(root: &Path) {
    fs::create_dir_all(root).unwrap();
    let run = |args: &[&str]| run_cli(root, args);
    run(&["simulate", "--n-sequences", "16", "--seed", "3", "--unlabeled", "--out", "unl", "--threads", "1"]);
    run(&["simulate", "--n-sequences", "24", "--seed", "4", "--label-noise", "5", "--out", "lab", "--threads", "1"]);
    run(&["pretrain", "--profile", "smoke", "--data", "unl", "--out", "pre", "--threads", "1"]);
    let enc = "pre/encoder.vxck";
    run(&["finetune", "--profile", "smoke", "--data", "lab", "--checkpoint", enc, "--out", "ft", "--threads", "1"]);
    run(&["forecast-train", "--profile", "smoke", "--data", "lab", "--checkpoint", enc, "--out", "fc", "--threads", "1"]);
    for (method, ckpt) in [("xvortex", Some("ft/localizer.vxck")), ("kalman", None), ("traj-lstm", None), ("supervised", None)] {
        let out = format!("eval_{method}");
        let mut args = vec!["eval", "--profile", "smoke", "--data", "lab", "--method", method, "--out", &out, "--threads", "1"];
        if let Some(c) = ckpt {
            args.extend(["--checkpoint", c]);
        }
        run(&args);
    }
    run(&["probe", "--profile", "smoke", "--data", "lab", "--checkpoint", enc, "--out", "probe", "--threads", "1"]);
    run(&["table", "--profile", "smoke", "--tables", "1,2,3,4", "--out", "tables", "--threads", "1"]);
    run(&["plot", "--metrics", "pre/metrics.csv", "--out", "plot/curves.svg", "--threads", "1"]);
    run(&[
        "render",
        "--profile",
        "smoke",
        "--data",
        "lab",
        "--sequence",
        "seq_00000",
        "--frame",
        "4",
        "--method",
        "xvortex",
        "--checkpoint",
        "ft/localizer.vxck",
        "--out",
        "render/frame.svg",
        "--threads",
        "1",
    ]);
    run(&["ablate", "--profile", "smoke", "--out", "ablate", "--threads", "1"]);
}

#[test]
fn c10_reproducibility() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    workflow(&a);
    workflow(&b);
    let (fa, fb) = (files_under(&a), files_under(&b));
    let names: Vec<&String> = fa.keys().collect();
    let differing: Vec<&String> = fa.iter().filter(|(k, v)| fb.get(*k) != Some(v)).map(|(k, _)| k).collect();
    let same_set = fa.len() == fb.len() && fa.keys().all(|k| fb.contains_key(k));
    let key = |suffix: &str| names.iter().filter(|n| n.ends_with(suffix)).count();
    let detail = format!(
        "{} files compared ({} checkpoints, {} CSVs), {} differ{}",
        fa.len(),
        key(".vxck"),
        key(".csv"),
        differing.len(),
        if differing.is_empty() { String::new() } else { format!(": {differing:?}") }
    );
    verdict(10, "reproducibility", same_set && differing.is_empty() && key(".vxck") >= 3, &detail, true);
}
