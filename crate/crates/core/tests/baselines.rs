use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vortexlab::baselines::{
    constant_velocity_forecast, dbscan, dbscan_centers, intensity_centroid, kalman_forecast, DbscanConfig, KalmanConfig,
};
use vortexlab::data::{CenterPair, PointCloudFrame};
use vortexlab::sim::{advance_vortex_state, Scenario};

/// Connected components of the core points by breadth-first search over
/// explicit pairwise distances. Non-core points stay `None`.
fn brute_force_core_components(points: &[[f64; 2]], eps: f64, min_pts: usize) -> Vec<Option<usize>> {
    let n = points.len();
    let close =
        |i: usize, j: usize| ((points[i][0] - points[j][0]).powi(2) + (points[i][1] - points[j][1]).powi(2)).sqrt() <= eps;
    let core: Vec<bool> = (0..n).map(|i| (0..n).filter(|&j| close(i, j)).count() >= min_pts).collect();
    let mut comp = vec![None; n];
    let mut next = 0;
    for s in 0..n {
        if !core[s] || comp[s].is_some() {
            continue;
        }
        let mut queue = std::collections::VecDeque::from([s]);
        comp[s] = Some(next);
        while let Some(i) = queue.pop_front() {
            for j in 0..n {
                if core[j] && comp[j].is_none() && close(i, j) {
                    comp[j] = Some(next);
                    queue.push_back(j);
                }
            }
        }
        next += 1;
    }
    comp
}

fn blob(rng: &mut ChaCha8Rng, c: [f64; 2], n: usize) -> Vec<[f64; 2]> {
    (0..n).map(|_| [c[0] + rng.gen_range(-3.0..3.0), c[1] + rng.gen_range(-3.0..3.0)]).collect()
}

#[test]
fn two_blobs_give_two_clusters_at_their_means() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = blob(&mut rng, [40.0, 100.0], 25);
    let b = blob(&mut rng, [-40.0, 95.0], 25);
    let pts: Vec<[f64; 2]> = a.iter().chain(&b).copied().collect();
    let labels = dbscan(&pts, 5.0, 4);
    let oracle = brute_force_core_components(&pts, 5.0, 4);
    for i in 0..pts.len() {
        for j in 0..pts.len() {
            if oracle[i].is_some() && oracle[j].is_some() {
                assert_eq!(labels[i] == labels[j], oracle[i] == oracle[j]);
            }
        }
    }
    assert!(labels[..25].iter().all(|l| *l == labels[0] && l.is_some()));
    assert!(labels[25..].iter().all(|l| *l == labels[25]));
    assert_ne!(labels[0], labels[25]);

    let frame = PointCloudFrame { timestamp: 0.0, points: pts.iter().map(|p| [p[0], p[1], 5.0]).collect() };
    let c = dbscan_centers(&frame, &DbscanConfig { eps: 5.0, min_pts: 4, velocity_threshold: 1.0 });
    let mean = |v: &[[f64; 2]]| {
        [v.iter().map(|p| p[0]).sum::<f64>() / v.len() as f64, v.iter().map(|p| p[1]).sum::<f64>() / v.len() as f64]
    };
    let (ma, mb) = (mean(&a), mean(&b));
    for k in 0..2 {
        assert!((c[0][k] - ma[k]).abs() < 1e-9 && (c[1][k] - mb[k]).abs() < 1e-9, "{c:?}");
    }
}

#[test]
fn weak_returns_fall_back_to_the_frame_centroid() {
    let frame = PointCloudFrame { timestamp: 0.0, points: vec![[0.0, 10.0, 0.1], [4.0, 20.0, -0.2], [8.0, 30.0, 0.0]] };
    let c = dbscan_centers(&frame, &DbscanConfig::default());
    assert_eq!(c, [[4.0, 20.0], [4.0, 20.0]]);
    let sparse = PointCloudFrame { timestamp: 0.0, points: (0..10).map(|i| [100.0 * i as f64, 50.0, 9.0]).collect() };
    let c = dbscan_centers(&sparse, &DbscanConfig { eps: 1.0, min_pts: 3, velocity_threshold: 0.5 });
    assert_eq!(c, [sparse.centroid(), sparse.centroid()]);
}

/// Weighted median of `y` and weighted means on each side, by explicit sums.
fn intensity_oracle(points: &[[f64; 3]]) -> CenterPair {
    let mut idx: Vec<usize> = (0..points.len()).collect();
    idx.sort_by(|&a, &b| points[a][0].total_cmp(&points[b][0]));
    let total: f64 = points.iter().map(|p| p[2].abs()).sum();
    let mut acc = 0.0;
    let mut median = f64::NAN;
    for &i in &idx {
        acc += points[i][2].abs();
        if acc >= 0.5 * total {
            median = points[i][0];
            break;
        }
    }
    let side = |low: bool| {
        let (mut w, mut y, mut z) = (0.0, 0.0, 0.0);
        for p in points.iter().filter(|p| (p[0] <= median) == low) {
            w += p[2].abs();
            y += p[2].abs() * p[0];
            z += p[2].abs() * p[1];
        }
        [y / w, z / w]
    };
    let (lo, hi) = (side(true), side(false));
    if hi[0] > lo[0] {
        [hi, lo]
    } else {
        [lo, hi]
    }
}

#[test]
fn intensity_centroid_matches_weighted_sums() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let n = rng.gen_range(4..200);
        let points: Vec<[f64; 3]> =
            (0..n).map(|_| [rng.gen_range(-150.0..150.0), rng.gen_range(0.0..300.0), rng.gen_range(-6.0..6.0)]).collect();
        let frame = PointCloudFrame { timestamp: 0.0, points: points.clone() };
        let got = intensity_centroid(&frame);
        let want = intensity_oracle(&points);
        for v in 0..2 {
            for d in 0..2 {
                assert!((got[v][d] - want[v][d]).abs() < 1e-9, "{got:?} vs {want:?}");
            }
        }
    }
}

#[test]
fn symmetric_point_masses_give_exact_centers() {
    let frame = PointCloudFrame {
        timestamp: 0.0,
        points: vec![[-30.0, 80.0, 2.0], [-30.0, 80.0, -2.0], [30.0, 80.0, 2.0], [30.0, 80.0, -2.0]],
    };
    assert_eq!(intensity_centroid(&frame), [[30.0, 80.0], [-30.0, 80.0]]);
}

#[test]
fn constant_velocity_example() {
    let h = [[[0.0, 100.0], [0.0, 100.0]], [[5.0, 95.0], [5.0, 95.0]]];
    let f = constant_velocity_forecast(&h).unwrap();
    assert_eq!(f[0][0], [10.0, 90.0]);
    assert_eq!(f[1][0], [15.0, 85.0]);
    assert!(constant_velocity_forecast(&h[..1]).is_err());
}

#[test]
fn constant_velocity_error_grows_on_a_ground_effect_track() {
    let sc = Scenario {
        class_id: 0,
        wingspan: 60.0,
        initial_circulation: 500.0,
        initial_height: 45.0,
        lateral_offset: 0.0,
        crosswind: 0.0,
        decay_time_constant: 80.0,
        turbulence_noise_sigma: 0.0,
        frame_interval: 5.0,
        n_frames: 5,
        core_radius: 4.8,
        first_scan_age: 0.0,
        site_offset: [0.0, 0.0],
    };
    let states = sc.trajectory().unwrap();
    let track: Vec<CenterPair> = states.iter().map(|s| s.centers()).collect();
    let f = constant_velocity_forecast(&track[..3]).unwrap();
    let err = |h: usize| {
        let (p, t) = (f[h], track[3 + h]);
        (0..2).map(|v| ((p[v][0] - t[v][0]).powi(2) + (p[v][1] - t[v][1]).powi(2)).sqrt()).sum::<f64>()
    };
    assert!(err(1) > err(0), "{} vs {}", err(1), err(0));
    assert!(advance_vortex_state(&states[0], 5.0, &sc).unwrap().y_port > states[0].y_port);
}

proptest! {
    #[test]
    fn kalman_matches_constant_velocity_on_noiseless_lines(
        start in prop::array::uniform4(-200.0..200.0f64),
        vel in prop::array::uniform4(-5.0..5.0f64),
        dt in 3.0..8.0f64,
        n in 3usize..6,
    ) {
        let history: Vec<CenterPair> = (0..n)
            .map(|k| {
                let t = k as f64 * dt;
                [[start[0] + vel[0] * t, start[1] + vel[1] * t], [start[2] + vel[2] * t, start[3] + vel[3] * t]]
            })
            .collect();
        let times: Vec<f64> = (0..n).map(|k| k as f64 * dt).collect();
        let cfg = KalmanConfig { q: 1e-9, r: 1e-6, velocity_prior_var: 100.0 };
        let (kf, resets) = kalman_forecast(&history, &times, &cfg).unwrap();
        let cv = constant_velocity_forecast(&history).unwrap();
        prop_assert_eq!(resets, 0);
        for h in 0..2 {
            for v in 0..2 {
                for d in 0..2 {
                    prop_assert!((kf[h][v][d] - cv[h][v][d]).abs() < 1e-6, "{:?} vs {:?}", kf, cv);
                }
            }
        }
    }
}
