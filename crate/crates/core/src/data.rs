//! Scan sequences: chunking, centering, point-count normalization and splits.

use rand::seq::index;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VortexError};
use crate::rng::{self, tag};

/// `(y, z, v_r)` in meters and m/s.
pub type Point = [f64; 3];
/// `(y, z)` in meters.
pub type Center = [f64; 2];
/// `[port, starboard]`.
pub type CenterPair = [Center; 2];

/// Default sequence length.
pub const SEQUENCE_LEN: usize = 5;
/// Consecutive frames of one sequence are less than this many seconds apart.
pub const MAX_FRAME_GAP: f64 = 8.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointCloudFrame {
    pub timestamp: f64,
    pub points: Vec<Point>,
}

impl PointCloudFrame {
    pub fn centroid(&self) -> Center {
        let n = self.points.len().max(1) as f64;
        let (sy, sz) = self.points.iter().fold((0.0, 0.0), |(a, b), p| (a + p[0], b + p[1]));
        [sy / n, sz / n]
    }

    /// `(min_y, min_z, max_y, max_z)`.
    pub fn bounding_box(&self) -> [f64; 4] {
        self.points.iter().fold([f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY], |b, p| {
            [b[0].min(p[0]), b[1].min(p[1]), b[2].max(p[0]), b[3].max(p[1])]
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScanSequence {
    pub event_id: String,
    pub frames: Vec<PointCloudFrame>,
    pub class_id: Option<usize>,
    /// Per-frame `[port, starboard]` centers, in the same frame of reference as the points.
    pub centers: Option<Vec<CenterPair>>,
    /// Offset already subtracted from `(y, z)`; add it back for absolute coordinates.
    pub centroid_removed: Center,
}

impl ScanSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for w in self.frames.windows(2) {
            let gap = w[1].timestamp - w[0].timestamp;
            if !(gap > 0.0 && gap < MAX_FRAME_GAP) {
                return Err(VortexError::Data(format!("{}: frame gap {gap} s outside (0, {MAX_FRAME_GAP})", self.event_id)));
            }
        }
        if let Some(c) = &self.centers {
            if c.len() != self.frames.len() {
                return Err(VortexError::Data(format!("{}: label count mismatch", self.event_id)));
            }
        }
        let finite = self.frames.iter().all(|f| f.points.iter().all(|p| p.iter().all(|v| v.is_finite())));
        if !finite {
            return Err(VortexError::NonFinite(self.event_id.clone()));
        }
        Ok(())
    }

    /// Keeps the frames at `indices` (and their labels), in the given order.
    pub fn select_frames(&self, indices: &[usize]) -> ScanSequence {
        ScanSequence {
            event_id: self.event_id.clone(),
            frames: indices.iter().map(|&i| self.frames[i].clone()).collect(),
            class_id: self.class_id,
            centers: self.centers.as_ref().map(|c| indices.iter().map(|&i| c[i]).collect()),
            centroid_removed: self.centroid_removed,
        }
    }

    /// Labels translated back to absolute coordinates.
    pub fn absolute_centers(&self) -> Option<Vec<CenterPair>> {
        let o = self.centroid_removed;
        self.centers
            .as_ref()
            .map(|cs| cs.iter().map(|c| [[c[0][0] + o[0], c[0][1] + o[1]], [c[1][0] + o[0], c[1][1] + o[1]]]).collect())
    }
}

/// Splits a recording into non-overlapping chunks of `t` frames; the trailing
/// remainder is discarded and recordings shorter than `t` yield nothing.
pub fn chunk_sequences(recording: &ScanSequence, t: usize) -> Vec<ScanSequence> {
    if t == 0 {
        return Vec::new();
    }
    (0..recording.len() / t)
        .map(|k| {
            let idx: Vec<usize> = (k * t..(k + 1) * t).collect();
            let mut chunk = recording.select_frames(&idx);
            chunk.event_id = format!("{}/c{k}", recording.event_id);
            chunk
        })
        .collect()
}

/// Subtracts the centroid of all `(y, z)` coordinates over all frames.
/// Radial velocity is untouched; labels move with the points.
pub fn center_sequence(seq: &ScanSequence) -> Result<(ScanSequence, Center)> {
    let total: usize = seq.frames.iter().map(|f| f.points.len()).sum();
    if total == 0 {
        return Err(VortexError::Empty(format!("sequence {} has no points", seq.event_id)));
    }
    let (mut sy, mut sz) = (0.0, 0.0);
    for p in seq.frames.iter().flat_map(|f| &f.points) {
        sy += p[0];
        sz += p[1];
    }
    let mu = [sy / total as f64, sz / total as f64];
    let mut out = seq.clone();
    for p in out.frames.iter_mut().flat_map(|f| f.points.iter_mut()) {
        p[0] -= mu[0];
        p[1] -= mu[1];
    }
    if let Some(cs) = &mut out.centers {
        for c in cs.iter_mut().flatten() {
            c[0] -= mu[0];
            c[1] -= mu[1];
        }
    }
    out.centroid_removed = [seq.centroid_removed[0] + mu[0], seq.centroid_removed[1] + mu[1]];
    Ok((out, mu))
}

/// Subsamples without replacement (keeping input order) or pads by resampling
/// with replacement so the frame has exactly `n` points.
pub fn normalize_point_count<R: Rng + ?Sized>(frame: &PointCloudFrame, n: usize, rng: &mut R) -> Result<PointCloudFrame> {
    let have = frame.points.len();
    if have == 0 {
        return Err(VortexError::Empty("frame has no points".into()));
    }
    let points = if have == n {
        frame.points.clone()
    } else if have > n {
        let mut idx = index::sample(rng, have, n).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| frame.points[i]).collect()
    } else {
        let mut pts = frame.points.clone();
        pts.extend((0..n - have).map(|_| frame.points[rng.gen_range(0..have)]));
        pts
    };
    Ok(PointCloudFrame { timestamp: frame.timestamp, points })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub ratios: [f64; 3],
    pub seed: u64,
}

/// Deterministic shuffled partition of recording ids into train/val/test.
pub fn split_dataset(ids: &[String], ratios: [f64; 3], seed: u64) -> Result<SplitSpec> {
    if ratios.iter().any(|r| *r < 0.0) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(VortexError::Config(format!("split ratios {ratios:?} must be non-negative and sum to 1")));
    }
    let needed = ratios.iter().filter(|r| **r > 0.0).count();
    if ids.len() < needed {
        return Err(VortexError::Data(format!("{} sequences cannot fill {needed} splits", ids.len())));
    }
    let mut shuffled = ids.to_vec();
    shuffled.sort();
    shuffled.shuffle(&mut rng::stream(seed, &[tag::SPLIT]));
    let n = ids.len();
    let mut sizes = [0usize; 3];
    for k in 0..3 {
        sizes[k] = (n as f64 * ratios[k]).round() as usize;
        if ratios[k] > 0.0 {
            sizes[k] = sizes[k].max(1);
        }
    }
    // absorb rounding drift in the train split
    let drift = sizes.iter().sum::<usize>() as isize - n as isize;
    sizes[0] = (sizes[0] as isize - drift).max(0) as usize;
    let test = shuffled.split_off(sizes[0] + sizes[1]);
    let val = shuffled.split_off(sizes[0]);
    Ok(SplitSpec { train: shuffled, val, test, ratios, seed })
}

/// Settings for turning recordings into model-ready sequences.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrepConfig {
    pub sequence_len: usize,
    pub n_points: usize,
    /// Sequence-level centering of `(y, z)`.
    pub center: bool,
}

impl Default for PrepConfig {
    fn default() -> Self {
        Self { sequence_len: SEQUENCE_LEN, n_points: 1024, center: true }
    }
}

/// Chunks, normalizes point counts and (optionally) centers every recording.
pub fn prepare_sequences(recordings: &[ScanSequence], cfg: PrepConfig, seed: u64) -> Result<Vec<ScanSequence>> {
    let mut out = Vec::new();
    for (ri, rec) in recordings.iter().enumerate() {
        for (ci, chunk) in chunk_sequences(rec, cfg.sequence_len).into_iter().enumerate() {
            let mut seq = chunk;
            for (fi, frame) in seq.frames.iter_mut().enumerate() {
                let mut r = rng::stream(seed, &[tag::POINT_COUNT, ri as u64, ci as u64, fi as u64]);
                *frame = normalize_point_count(frame, cfg.n_points, &mut r)?;
            }
            if cfg.center {
                seq = center_sequence(&seq)?.0;
            }
            seq.validate()?;
            out.push(seq);
        }
    }
    Ok(out)
}

/// Sequences whose recording id (the event id before any `/c<k>` suffix) is in `ids`.
pub fn select_by_recording<'a>(seqs: &'a [ScanSequence], ids: &[String]) -> Vec<&'a ScanSequence> {
    let set: std::collections::HashSet<&str> = ids.iter().map(String::as_str).collect();
    seqs.iter().filter(|s| set.contains(recording_id(&s.event_id))).collect()
}

pub fn recording_id(event_id: &str) -> &str {
    event_id.split('/').next().unwrap_or(event_id)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    fn recording(n_frames: usize, pts: usize, seed: u64) -> ScanSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ScanSequence {
            event_id: format!("rec{seed}"),
            frames: (0..n_frames)
                .map(|k| PointCloudFrame {
                    timestamp: 6.0 * k as f64,
                    points: (0..pts)
                        .map(|_| [rng.gen_range(-50.0..150.0), rng.gen_range(0.0..200.0), rng.gen_range(-5.0..5.0)])
                        .collect(),
                })
                .collect(),
            class_id: Some(1),
            centers: Some((0..n_frames).map(|k| [[k as f64, 100.0], [-(k as f64), 90.0]]).collect()),
            centroid_removed: [0.0, 0.0],
        }
    }

    #[test]
    fn chunking_counts() {
        assert_eq!(chunk_sequences(&recording(12, 3, 0), 5).len(), 2);
        assert_eq!(chunk_sequences(&recording(5, 3, 0), 5).len(), 1);
        assert!(chunk_sequences(&recording(4, 3, 0), 5).is_empty());
    }

    #[test]
    fn chunking_preserves_order_and_timestamps() {
        let rec = recording(12, 3, 1);
        let chunks = chunk_sequences(&rec, 5);
        for (k, c) in chunks.iter().enumerate() {
            for (j, f) in c.frames.iter().enumerate() {
                assert_eq!(f, &rec.frames[k * 5 + j]);
            }
            assert_eq!(c.centers.as_ref().unwrap()[0], rec.centers.as_ref().unwrap()[k * 5]);
        }
    }

    #[test]
    fn centering_examples() {
        let mut flat = recording(5, 4, 2);
        for p in flat.frames.iter_mut().flat_map(|f| f.points.iter_mut()) {
            p[0] = 100.0;
            p[1] = 50.0;
        }
        let (c, mu) = center_sequence(&flat).unwrap();
        assert_eq!(mu, [100.0, 50.0]);
        assert!(c.frames.iter().flat_map(|f| &f.points).all(|p| p[0] == 0.0 && p[1] == 0.0));
        assert_eq!(c.centers.as_ref().unwrap()[0][0], [-100.0, 50.0]);
        assert_eq!(c.absolute_centers().unwrap(), flat.centers.clone().unwrap());

        let (c1, _) = center_sequence(&recording(5, 50, 3)).unwrap();
        let (c2, mu2) = center_sequence(&c1).unwrap();
        assert!(mu2[0].hypot(mu2[1]) < 1e-9);
        for (a, b) in c1.frames.iter().flat_map(|f| &f.points).zip(c2.frames.iter().flat_map(|f| &f.points)) {
            assert!((a[0] - b[0]).abs() < 1e-9 && (a[1] - b[1]).abs() < 1e-9 && a[2] == b[2]);
        }
    }

    #[test]
    fn centering_empty_is_error() {
        let mut s = recording(2, 0, 0);
        s.centers = None;
        assert!(center_sequence(&s).is_err());
    }

    #[test]
    fn point_count_normalization() {
        let frame = recording(1, 2048, 4).frames.remove(0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let down = normalize_point_count(&frame, 1024, &mut rng).unwrap();
        assert_eq!(down.points.len(), 1024);
        let distinct: HashSet<[u64; 3]> = down.points.iter().map(|p| p.map(f64::to_bits)).collect();
        assert_eq!(distinct.len(), 1024);

        let small = recording(1, 700, 5).frames.remove(0);
        let up = normalize_point_count(&small, 1024, &mut rng).unwrap();
        assert_eq!(up.points.len(), 1024);
        let originals: HashSet<[u64; 3]> = small.points.iter().map(|p| p.map(f64::to_bits)).collect();
        assert!(up.points.iter().all(|p| originals.contains(&p.map(f64::to_bits))));

        let a = normalize_point_count(&frame, 100, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = normalize_point_count(&frame, 100, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
        let empty = PointCloudFrame { timestamp: 0.0, points: vec![] };
        assert!(normalize_point_count(&empty, 10, &mut rng).is_err());
    }

    #[test]
    fn split_sizes_and_partition() {
        let ids: Vec<String> = (0..10).map(|i| format!("s{i}")).collect();
        let s = split_dataset(&ids, [0.7, 0.2, 0.1], 3).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (7, 2, 1));
        assert_eq!(s, split_dataset(&ids, [0.7, 0.2, 0.1], 3).unwrap());
        let mut all: Vec<String> = s.train.iter().chain(&s.val).chain(&s.test).cloned().collect();
        all.sort();
        let mut expected = ids.clone();
        expected.sort();
        assert_eq!(all, expected);
        assert!(split_dataset(&ids[..2], [0.7, 0.2, 0.1], 0).is_err());
        assert!(split_dataset(&ids, [0.7, 0.2, 0.2], 0).is_err());
    }

    #[test]
    fn prepared_sequences_have_fixed_shape() {
        let recs = vec![recording(12, 300, 6), recording(4, 300, 7), recording(5, 2000, 8)];
        let cfg = PrepConfig { sequence_len: 5, n_points: 256, center: true };
        let seqs = prepare_sequences(&recs, cfg, 0).unwrap();
        assert_eq!(seqs.len(), 3);
        for s in &seqs {
            assert_eq!(s.len(), 5);
            assert!(s.frames.iter().all(|f| f.points.len() == 256));
        }
        assert_eq!(seqs, prepare_sequences(&recs, cfg, 0).unwrap());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]
            #[test]
            fn splits_never_leak_events(n in 3usize..200, seed in 0u64..1000) {
                let ids: Vec<String> = (0..n).map(|i| format!("e{i}")).collect();
                let s = split_dataset(&ids, [0.7, 0.2, 0.1], seed).unwrap();
                let tr: HashSet<_> = s.train.iter().collect();
                let va: HashSet<_> = s.val.iter().collect();
                let te: HashSet<_> = s.test.iter().collect();
                prop_assert!(tr.is_disjoint(&va) && tr.is_disjoint(&te) && va.is_disjoint(&te));
                prop_assert_eq!(tr.len() + va.len() + te.len(), n);
            }

            #[test]
            fn centered_centroid_vanishes(seed in 0u64..500) {
                let (c, _) = center_sequence(&recording(5, 40, seed)).unwrap();
                let all: Vec<&Point> = c.frames.iter().flat_map(|f| &f.points).collect();
                let my = all.iter().map(|p| p[0]).sum::<f64>() / all.len() as f64;
                let mz = all.iter().map(|p| p[1]).sum::<f64>() / all.len() as f64;
                prop_assert!(my.hypot(mz) < 1e-9);
            }
        }
    }
}
