//! Two-view construction for contrastive pretraining.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{normalize_point_count, ScanSequence};
use crate::error::{Result, VortexError};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Weak-view jitter on `(y, z)` in metres.
    pub jitter_sigma: f64,
    /// Strong-view per-point dropout probability.
    pub dropout_p: f64,
    /// Strong-view rotation angle is drawn from `[-rotation_range, rotation_range]`.
    pub rotation_range: f64,
    pub min_frames_kept: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { jitter_sigma: 0.05, dropout_p: 0.3, rotation_range: std::f64::consts::PI / 6.0, min_frames_kept: 3 }
    }
}

impl AugmentConfig {
    pub fn validate(&self, t: usize) -> Result<()> {
        if !(self.jitter_sigma >= 0.0) {
            return Err(VortexError::Config("jitter_sigma must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(VortexError::Config("dropout_p must lie in [0, 1)".into()));
        }
        if !(self.rotation_range >= 0.0) {
            return Err(VortexError::Config("rotation_range must be >= 0".into()));
        }
        if self.min_frames_kept < 1 || self.min_frames_kept > t {
            return Err(VortexError::Config(format!("min_frames_kept {} outside [1, {t}]", self.min_frames_kept)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewPair {
    pub view_weak: ScanSequence,
    pub view_strong: ScanSequence,
}

impl ViewPair {
    pub fn event_id(&self) -> &str {
        &self.view_weak.event_id
    }
}

pub fn weak_view<R: Rng + ?Sized>(seq: &ScanSequence, rng: &mut R, cfg: &AugmentConfig) -> ScanSequence {
    let mut out = seq.clone();
    if cfg.jitter_sigma == 0.0 {
        return out;
    }
    let noise = Normal::new(0.0, cfg.jitter_sigma).expect("jitter_sigma is finite and non-negative");
    for p in out.frames.iter_mut().flat_map(|f| f.points.iter_mut()) {
        p[0] += noise.sample(rng);
        p[1] += noise.sample(rng);
    }
    out
}

/// Strictly increasing frame indices: `k` of `t`, with `k` uniform in `[min_kept, t]`.
pub fn subsample_frames<R: Rng + ?Sized>(t: usize, min_kept: usize, rng: &mut R) -> Vec<usize> {
    let min_kept = min_kept.clamp(1, t.max(1));
    let k = rng.gen_range(min_kept..=t);
    let mut idx = index::sample(rng, t, k).into_vec();
    idx.sort_unstable();
    idx
}

/// Rotates `(y, z)` of every point and label by `theta` about `pivot`.
pub fn rotate_sequence(seq: &mut ScanSequence, theta: f64, pivot: [f64; 2]) {
    let (s, c) = theta.sin_cos();
    let rot = |y: f64, z: f64| {
        let (dy, dz) = (y - pivot[0], z - pivot[1]);
        (pivot[0] + c * dy - s * dz, pivot[1] + s * dy + c * dz)
    };
    for p in seq.frames.iter_mut().flat_map(|f| f.points.iter_mut()) {
        (p[0], p[1]) = rot(p[0], p[1]);
    }
    if let Some(cs) = &mut seq.centers {
        for q in cs.iter_mut().flatten() {
            (q[0], q[1]) = rot(q[0], q[1]);
        }
    }
}

fn sequence_centroid(seq: &ScanSequence) -> [f64; 2] {
    let (mut sy, mut sz, mut n) = (0.0, 0.0, 0usize);
    for p in seq.frames.iter().flat_map(|f| &f.points) {
        sy += p[0];
        sz += p[1];
        n += 1;
    }
    if n == 0 {
        [0.0, 0.0]
    } else {
        [sy / n as f64, sz / n as f64]
    }
}

/// Frame skipping, point dropout (re-padded to the original count) and one
/// rigid in-plane rotation about the sequence centroid. `v_r` is untouched.
pub fn strong_view<R: Rng + ?Sized>(seq: &ScanSequence, rng: &mut R, cfg: &AugmentConfig) -> Result<ScanSequence> {
    let keep = subsample_frames(seq.len(), cfg.min_frames_kept, rng);
    let mut out = seq.select_frames(&keep);
    if cfg.dropout_p > 0.0 {
        for frame in &mut out.frames {
            let n = frame.points.len();
            let kept: Vec<_> = frame.points.iter().copied().filter(|_| rng.gen::<f64>() >= cfg.dropout_p).collect();
            let kept = if kept.is_empty() { vec![frame.points[rng.gen_range(0..n)]] } else { kept };
            frame.points = kept;
            *frame = normalize_point_count(frame, n, rng)?;
        }
    }
    if cfg.rotation_range > 0.0 {
        let theta = rng.gen_range(-cfg.rotation_range..=cfg.rotation_range);
        let pivot = sequence_centroid(seq);
        rotate_sequence(&mut out, theta, pivot);
    }
    Ok(out)
}

pub fn make_view_pair<R: Rng + ?Sized>(seq: &ScanSequence, rng: &mut R, cfg: &AugmentConfig) -> Result<ViewPair> {
    let mut weak_rng = ChaCha8Rng::seed_from_u64(rng.gen());
    let mut strong_rng = ChaCha8Rng::seed_from_u64(rng.gen());
    Ok(ViewPair { view_weak: weak_view(seq, &mut weak_rng, cfg), view_strong: strong_view(seq, &mut strong_rng, cfg)? })
}

/// View pair for sample `index` in `epoch`, independent of batch composition.
pub fn keyed_view_pair(
    seq: &ScanSequence,
    seed: u64,
    stream_tag: u64,
    epoch: u64,
    index: u64,
    cfg: &AugmentConfig,
) -> Result<ViewPair> {
    let mut r = rng::stream(seed, &[stream_tag, epoch, index]);
    make_view_pair(seq, &mut r, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::PointCloudFrame;

    fn seq(t: usize, n: usize, seed: u64) -> ScanSequence {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        ScanSequence {
            event_id: "seq_00001/c0".into(),
            frames: (0..t)
                .map(|k| PointCloudFrame {
                    timestamp: k as f64 * 6.0,
                    points: (0..n)
                        .map(|_| [r.gen_range(-50.0..50.0), r.gen_range(-30.0..30.0), r.gen_range(-5.0..5.0)])
                        .collect(),
                })
                .collect(),
            class_id: None,
            centers: None,
            centroid_removed: [0.0, 0.0],
        }
    }

    fn off() -> AugmentConfig {
        AugmentConfig { jitter_sigma: 0.0, dropout_p: 0.0, rotation_range: 0.0, min_frames_kept: 5 }
    }

    #[test]
    fn zero_strength_views_are_identity() {
        let s = seq(5, 40, 1);
        let mut r = ChaCha8Rng::seed_from_u64(2);
        assert_eq!(weak_view(&s, &mut r, &off()), s);
        assert_eq!(strong_view(&s, &mut r, &off()).unwrap(), s);
    }

    #[test]
    fn jitter_has_requested_spread() {
        let s = seq(1, 50_000, 3);
        let cfg = AugmentConfig { jitter_sigma: 0.1, ..off() };
        let w = weak_view(&s, &mut ChaCha8Rng::seed_from_u64(4), &cfg);
        let d: Vec<f64> =
            s.frames[0].points.iter().zip(&w.frames[0].points).flat_map(|(a, b)| [b[0] - a[0], b[1] - a[1]]).collect();
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        let sd = (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d.len() as f64).sqrt();
        assert!((sd - 0.1).abs() < 0.01, "{sd}");
        assert_eq!(w.frames[0].points.len(), 50_000);
        for (a, b) in s.frames[0].points.iter().zip(&w.frames[0].points) {
            assert_eq!(a[2], b[2]);
        }
    }

    #[test]
    fn quarter_turn_maps_unit_y_to_unit_z() {
        let mut s = seq(1, 1, 0);
        s.frames[0].points = vec![[1.0, 0.0, 2.5]];
        rotate_sequence(&mut s, std::f64::consts::FRAC_PI_2, [0.0, 0.0]);
        let p = s.frames[0].points[0];
        assert!(p[0].abs() < 1e-15 && (p[1] - 1.0).abs() < 1e-15 && p[2] == 2.5);
    }

    #[test]
    fn rotation_preserves_distance_to_pivot() {
        let s = seq(5, 200, 5);
        let mut r = s.clone();
        rotate_sequence(&mut r, 0.4, [0.0, 0.0]);
        for (a, b) in s.frames.iter().flat_map(|f| &f.points).zip(r.frames.iter().flat_map(|f| &f.points)) {
            assert!((a[0].hypot(a[1]) - b[0].hypot(b[1])).abs() < 1e-9);
        }
    }

    #[test]
    fn dropout_keeps_expected_fraction() {
        let s = seq(1, 100_000, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let kept = s.frames[0].points.iter().filter(|_| rng.gen::<f64>() >= 0.3).count();
        let frac = kept as f64 / 1e5;
        assert!((0.66..=0.74).contains(&frac), "{frac}");
        let cfg = AugmentConfig { dropout_p: 0.3, ..off() };
        let v = strong_view(&s, &mut ChaCha8Rng::seed_from_u64(8), &cfg).unwrap();
        assert_eq!(v.frames[0].points.len(), 100_000);
    }

    #[test]
    fn strong_view_keeps_order_and_point_counts() {
        let s = seq(5, 64, 9);
        let cfg = AugmentConfig::default();
        for k in 0..50 {
            let v = strong_view(&s, &mut ChaCha8Rng::seed_from_u64(k), &cfg).unwrap();
            assert!((3..=5).contains(&v.len()));
            assert!(v.frames.windows(2).all(|w| w[0].timestamp < w[1].timestamp));
            assert!(v.frames.iter().all(|f| f.points.len() == 64));
        }
    }

    #[test]
    fn pairs_share_ids_are_reproducible_and_differ() {
        let s = seq(5, 64, 10);
        let cfg = AugmentConfig::default();
        let a = keyed_view_pair(&s, 1, rng::tag::AUGMENT, 3, 17, &cfg).unwrap();
        let b = keyed_view_pair(&s, 1, rng::tag::AUGMENT, 3, 17, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.view_weak.event_id, a.view_strong.event_id);
        assert_eq!(a.event_id(), s.event_id);
        assert_ne!(a.view_weak, a.view_strong);
        let c = keyed_view_pair(&s, 1, rng::tag::AUGMENT, 4, 17, &cfg).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn config_bounds() {
        assert!(AugmentConfig::default().validate(5).is_ok());
        assert!(AugmentConfig { dropout_p: 1.0, ..Default::default() }.validate(5).is_err());
        assert!(AugmentConfig { min_frames_kept: 6, ..Default::default() }.validate(5).is_err());
        assert!(AugmentConfig { min_frames_kept: 0, ..Default::default() }.validate(5).is_err());
    }
}
