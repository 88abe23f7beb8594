//! Synthetic Doppler-LiDAR wake-vortex scans.
//!
//! A counter-rotating Lamb–Oseen vortex pair is advected by mutual induction,
//! crosswind and (near the ground) mirrored image vortices, while its
//! circulation decays exponentially. Each frame is a range-height-indicator
//! slice: the radial velocity seen along the LiDAR line of sight at every
//! (elevation, range-gate) sample, plus turbulence noise and aerosol dropout.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{CenterPair, Point, PointCloudFrame, ScanSequence};
use crate::error::{Result, VortexError};
use crate::io;
use crate::rng::{self, tag};

/// Longest integration substep in seconds.
pub const MAX_SUBSTEP: f64 = 0.25;
/// Image vortices act on a vortex whose altitude is below this multiple of the wingspan.
pub const GROUND_EFFECT_SPANS: f64 = 1.5;
/// Ratio of initial vortex separation to wingspan for elliptic loading.
pub const SEPARATION_RATIO: f64 = PI / 4.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VortexPairState {
    pub y_port: f64,
    pub z_port: f64,
    pub y_star: f64,
    pub z_star: f64,
    pub gamma_port: f64,
    pub gamma_star: f64,
    pub core_radius: f64,
    pub age: f64,
}

impl VortexPairState {
    pub fn centers(&self) -> CenterPair {
        [[self.y_port, self.z_port], [self.y_star, self.z_star]]
    }

    fn vortices(&self) -> [(f64, f64, f64); 2] {
        [(self.y_port, self.z_port, self.gamma_port), (self.y_star, self.z_star, self.gamma_star)]
    }
}

/// Lamb–Oseen velocity at `(y, z)` induced by a single vortex.
fn lamb_oseen(y: f64, z: f64, yc: f64, zc: f64, gamma: f64, core_radius: f64) -> (f64, f64) {
    let (dy, dz) = (y - yc, z - zc);
    let r2 = dy * dy + dz * dz;
    if r2 == 0.0 {
        return (0.0, 0.0);
    }
    let rc2 = core_radius * core_radius;
    // v_θ / r, with the tangential direction (-dz, dy) / r.
    let k = gamma / (2.0 * PI * r2) * (1.0 - (-r2 / rc2).exp());
    (-k * dz, k * dy)
}

/// Velocity induced at `query` by both vortices, plus both image vortices
/// mirrored at `z = 0` when `ground_effect` is set.
pub fn induced_velocity(query: (f64, f64), state: &VortexPairState, ground_effect: bool) -> (f64, f64) {
    let (y, z) = query;
    let mut v = (0.0, 0.0);
    for (yc, zc, g) in state.vortices() {
        let d = lamb_oseen(y, z, yc, zc, g, state.core_radius);
        v.0 += d.0;
        v.1 += d.1;
        if ground_effect {
            let d = lamb_oseen(y, z, yc, -zc, -g, state.core_radius);
            v.0 += d.0;
            v.1 += d.1;
        }
    }
    v
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanGeometry {
    pub lidar_y: f64,
    pub lidar_z: f64,
    /// Elevation angles in radians, strictly increasing.
    pub elevations: Vec<f64>,
    /// Range gates in meters, strictly increasing and positive.
    pub ranges: Vec<f64>,
    /// Probability that a sample survives aerosol dropout.
    pub keep_probability: f64,
}

impl ScanGeometry {
    /// Evenly spaced RHI grid.
    pub fn grid(
        lidar: (f64, f64),
        elevation_deg: (f64, f64),
        n_elevations: usize,
        range_m: (f64, f64),
        n_ranges: usize,
        keep_probability: f64,
    ) -> Self {
        let lin = |a: f64, b: f64, n: usize| -> Vec<f64> {
            if n == 1 {
                return vec![a];
            }
            (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()
        };
        Self {
            lidar_y: lidar.0,
            lidar_z: lidar.1,
            elevations: lin(elevation_deg.0.to_radians(), elevation_deg.1.to_radians(), n_elevations),
            ranges: lin(range_m.0, range_m.1, n_ranges),
            keep_probability,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let increasing = |v: &[f64]| v.windows(2).all(|w| w[1] > w[0]);
        if self.elevations.is_empty() || self.ranges.is_empty() {
            return Err(VortexError::Config("scan grid is empty".into()));
        }
        if !increasing(&self.elevations) || !increasing(&self.ranges) {
            return Err(VortexError::Config("elevations and ranges must be strictly increasing".into()));
        }
        if self.ranges[0] <= 0.0 {
            return Err(VortexError::Config("range gates must be positive".into()));
        }
        if !(self.keep_probability > 0.0 && self.keep_probability <= 1.0) {
            return Err(VortexError::Config("keep_probability must lie in (0, 1]".into()));
        }
        Ok(())
    }

    /// Sample positions with `z > 0` and their line-of-sight unit vectors.
    pub fn samples(&self) -> Vec<((f64, f64), (f64, f64))> {
        let mut out = Vec::with_capacity(self.elevations.len() * self.ranges.len());
        for &phi in &self.elevations {
            let (s, c) = phi.sin_cos();
            for &r in &self.ranges {
                let p = (self.lidar_y + r * c, self.lidar_z + r * s);
                if p.1 > 0.0 {
                    out.push((p, (c, s)));
                }
            }
        }
        out
    }
}

impl Default for ScanGeometry {
    fn default() -> Self {
        Self::grid((-300.0, 0.0), (1.5, 35.0), 64, (120.0, 480.0), 64, 0.9)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AircraftClass {
    pub name: String,
    /// Wingspan `b` in meters.
    pub wingspan: f64,
    /// Nominal initial circulation in m²/s.
    pub circulation: f64,
}

/// Class catalog plus the ranges scenarios are drawn from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CatalogConfig {
    pub classes: Vec<AircraftClass>,
    /// Relative half-width of the uniform jitter on circulation.
    pub circulation_jitter: f64,
    pub wingspan_jitter: f64,
    pub initial_height: [f64; 2],
    pub lateral_offset: [f64; 2],
    pub crosswind: [f64; 2],
    pub decay_time_constant: [f64; 2],
    pub noise_sigma: [f64; 2],
    pub frame_interval: [f64; 2],
    pub first_scan_age: [f64; 2],
    /// Core radius as a fraction of the wingspan.
    pub core_radius_ratio: f64,
    /// Per-site translation of the reported coordinates (lateral, altitude).
    #[serde(default)]
    pub site_lateral: [f64; 2],
    #[serde(default)]
    pub site_elevation: [f64; 2],
}

impl Default for CatalogConfig {
    fn default() -> Self {
        let class = |name: &str, wingspan: f64, circulation: f64| AircraftClass { name: name.into(), wingspan, circulation };
        Self {
            classes: vec![
                class("small", 24.0, 180.0),
                class("medium", 36.0, 330.0),
                class("heavy", 60.0, 500.0),
                class("super", 80.0, 650.0),
            ],
            circulation_jitter: 0.10,
            wingspan_jitter: 0.05,
            initial_height: [40.0, 160.0],
            lateral_offset: [-40.0, 40.0],
            crosswind: [-1.5, 1.5],
            decay_time_constant: [40.0, 90.0],
            noise_sigma: [0.2, 0.6],
            frame_interval: [5.0, 7.5],
            first_scan_age: [4.0, 20.0],
            core_radius_ratio: 0.08,
            site_lateral: [0.0, 0.0],
            site_elevation: [0.0, 0.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub class_id: usize,
    pub wingspan: f64,
    pub initial_circulation: f64,
    pub initial_height: f64,
    pub lateral_offset: f64,
    pub crosswind: f64,
    pub decay_time_constant: f64,
    pub turbulence_noise_sigma: f64,
    pub frame_interval: f64,
    pub n_frames: usize,
    pub core_radius: f64,
    /// Vortex age at the first scan.
    pub first_scan_age: f64,
    /// Translation from the simulation frame to the reported site frame.
    #[serde(default)]
    pub site_offset: [f64; 2],
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        let ok = self.initial_circulation > 0.0
            && self.wingspan > 0.0
            && self.initial_height > 0.0
            && self.core_radius > 0.0
            && self.decay_time_constant > 0.0
            && self.frame_interval > 0.0
            && self.frame_interval < 8.0;
        if ok {
            Ok(())
        } else {
            Err(VortexError::Config(format!("invalid scenario {self:?}")))
        }
    }

    pub fn initial_separation(&self) -> f64 {
        SEPARATION_RATIO * self.wingspan
    }

    /// State at roll-up: pair centered on the lateral offset at the initial height.
    pub fn rollup_state(&self) -> VortexPairState {
        let half = 0.5 * self.initial_separation();
        VortexPairState {
            y_port: self.lateral_offset + half,
            z_port: self.initial_height,
            y_star: self.lateral_offset - half,
            z_star: self.initial_height,
            gamma_port: self.initial_circulation,
            gamma_star: -self.initial_circulation,
            core_radius: self.core_radius,
            age: 0.0,
        }
    }

    /// Ground-truth states at every frame time.
    pub fn trajectory(&self) -> Result<Vec<VortexPairState>> {
        let mut state = self.rollup_state();
        if self.first_scan_age > 0.0 {
            state = advance_vortex_state(&state, self.first_scan_age, self)?;
        }
        let mut out = Vec::with_capacity(self.n_frames);
        for k in 0..self.n_frames {
            if k > 0 {
                state = advance_vortex_state(&state, self.frame_interval, self)?;
            }
            out.push(state);
        }
        Ok(out)
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, range: [f64; 2]) -> f64 {
    if range[1] > range[0] {
        rng.gen_range(range[0]..range[1])
    } else {
        range[0]
    }
}

/// Draws a scenario; the class is uniform over the catalog.
pub fn sample_scenario(seed: u64, catalog: &CatalogConfig, n_frames: usize) -> Result<Scenario> {
    if catalog.classes.is_empty() {
        return Err(VortexError::Empty("aircraft catalog".into()));
    }
    let mut rng = rng::stream(seed, &[tag::SCENARIO]);
    let class_id = rng.gen_range(0..catalog.classes.len());
    let class = &catalog.classes[class_id];
    let jitter = |rng: &mut rand_chacha::ChaCha8Rng, rel: f64| {
        if rel > 0.0 {
            1.0 + rng.gen_range(-rel..rel)
        } else {
            1.0
        }
    };
    let initial_circulation = class.circulation * jitter(&mut rng, catalog.circulation_jitter);
    let wingspan = class.wingspan * jitter(&mut rng, catalog.wingspan_jitter);
    let scenario = Scenario {
        class_id,
        wingspan,
        initial_circulation,
        initial_height: uniform(&mut rng, catalog.initial_height),
        lateral_offset: uniform(&mut rng, catalog.lateral_offset),
        crosswind: uniform(&mut rng, catalog.crosswind),
        decay_time_constant: uniform(&mut rng, catalog.decay_time_constant),
        turbulence_noise_sigma: uniform(&mut rng, catalog.noise_sigma),
        frame_interval: uniform(&mut rng, catalog.frame_interval),
        n_frames,
        core_radius: catalog.core_radius_ratio * wingspan,
        first_scan_age: uniform(&mut rng, catalog.first_scan_age),
        site_offset: [0.0, 0.0],
    };
    let site_offset = [uniform(&mut rng, catalog.site_lateral), uniform(&mut rng, catalog.site_elevation)];
    let scenario = Scenario { site_offset, ..scenario };
    scenario.validate()?;
    Ok(scenario)
}

/// Velocities of the two vortex centers: mutual induction, images when below
/// the ground-effect altitude, and the crosswind.
fn center_velocities(s: &VortexPairState, wingspan: f64, crosswind: f64) -> [(f64, f64); 2] {
    let v = s.vortices();
    let threshold = GROUND_EFFECT_SPANS * wingspan;
    let mut out = [(0.0, 0.0); 2];
    for k in 0..2 {
        let (y, z, _) = v[k];
        let (oy, oz, og) = v[1 - k];
        let mut vel = lamb_oseen(y, z, oy, oz, og, s.core_radius);
        if z < threshold {
            for (iy, iz, ig) in v {
                let d = lamb_oseen(y, z, iy, -iz, -ig, s.core_radius);
                vel.0 += d.0;
                vel.1 += d.1;
            }
        }
        vel.0 += crosswind;
        out[k] = vel;
    }
    out
}

/// Advances the pair by `dt` seconds with classic RK4 on substeps of at most
/// [`MAX_SUBSTEP`]; circulation decays as `Γ·exp(−t/τ)` along the way.
pub fn advance_vortex_state(state: &VortexPairState, dt: f64, scenario: &Scenario) -> Result<VortexPairState> {
    if !(dt > 0.0) {
        return Err(VortexError::Config(format!("time step must be positive, got {dt}")));
    }
    let n = (dt / MAX_SUBSTEP).ceil().max(1.0) as usize;
    let h = dt / n as f64;
    let tau = scenario.decay_time_constant;
    let mut s = *state;
    for _ in 0..n {
        let at = |base: &VortexPairState, dpos: &[(f64, f64); 2], scale: f64, t: f64| {
            let decay = (-t / tau).exp();
            let mut x = *base;
            x.y_port += scale * dpos[0].0;
            x.z_port += scale * dpos[0].1;
            x.y_star += scale * dpos[1].0;
            x.z_star += scale * dpos[1].1;
            x.gamma_port *= decay;
            x.gamma_star *= decay;
            x
        };
        let f = |x: &VortexPairState| center_velocities(x, scenario.wingspan, scenario.crosswind);
        let zero = [(0.0, 0.0); 2];
        let k1 = f(&at(&s, &zero, 0.0, 0.0));
        let k2 = f(&at(&s, &k1, 0.5 * h, 0.5 * h));
        let k3 = f(&at(&s, &k2, 0.5 * h, 0.5 * h));
        let k4 = f(&at(&s, &k3, h, h));
        let comb = |i: usize, c: fn(&(f64, f64)) -> f64| h / 6.0 * (c(&k1[i]) + 2.0 * c(&k2[i]) + 2.0 * c(&k3[i]) + c(&k4[i]));
        s.y_port += comb(0, |v| v.0);
        s.z_port += comb(0, |v| v.1);
        s.y_star += comb(1, |v| v.0);
        s.z_star += comb(1, |v| v.1);
        let sub_decay = (-h / tau).exp();
        s.gamma_port *= sub_decay;
        s.gamma_star *= sub_decay;
    }
    let decay = (-dt / tau).exp();
    s.gamma_port = state.gamma_port * decay;
    s.gamma_star = state.gamma_star * decay;
    s.age = state.age + dt;
    Ok(s)
}

/// Whether the flow field seen by the LiDAR includes the image vortices.
pub fn in_ground_effect(state: &VortexPairState, wingspan: f64) -> bool {
    state.z_port.min(state.z_star) < GROUND_EFFECT_SPANS * wingspan
}

/// Renders one frame. Returns the frame and whether dropout had to be relaxed
/// because every sample was dropped.
pub fn render_scan<R: Rng + ?Sized>(
    state: &VortexPairState,
    geometry: &ScanGeometry,
    scenario: &Scenario,
    timestamp: f64,
    rng: &mut R,
) -> Result<(PointCloudFrame, bool)> {
    geometry.validate()?;
    let ground = in_ground_effect(state, scenario.wingspan);
    let sigma = scenario.turbulence_noise_sigma;
    let noise = Normal::new(0.0, sigma.max(0.0)).map_err(|e| VortexError::Config(e.to_string()))?;
    let clean: Vec<Point> = geometry
        .samples()
        .into_iter()
        .map(|(p, los)| {
            let v = induced_velocity(p, state, ground);
            [p.0, p.1, v.0 * los.0 + v.1 * los.1]
        })
        .collect();
    if clean.is_empty() {
        return Err(VortexError::Config("scan geometry has no samples above ground".into()));
    }
    let mut drop = 1.0 - geometry.keep_probability;
    let mut relaxed = false;
    loop {
        let mut points = Vec::with_capacity(clean.len());
        for p in &clean {
            let n = if sigma > 0.0 { noise.sample(rng) } else { 0.0 };
            let keep = drop <= 0.0 || rng.gen::<f64>() >= drop;
            if keep {
                points.push([p[0], p[1], p[2] + n]);
            }
        }
        if !points.is_empty() {
            return Ok((PointCloudFrame { timestamp, points }, relaxed));
        }
        drop *= 0.5;
        relaxed = true;
    }
}

/// Everything needed to generate a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_sequences: usize,
    pub n_frames: usize,
    pub seed: u64,
    /// When false, labels only go to the sealed oracle sidecar.
    pub labeled: bool,
    /// Std-dev (m) of Gaussian noise added to the published center labels.
    pub label_noise_sigma: f64,
    pub catalog: CatalogConfig,
    pub geometry: ScanGeometry,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_sequences: 100,
            n_frames: 5,
            seed: 0,
            labeled: true,
            label_noise_sigma: 0.0,
            catalog: CatalogConfig::default(),
            geometry: ScanGeometry::default(),
        }
    }
}

/// One simulated recording with its exact ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct SimulatedSequence {
    pub sequence_id: String,
    pub scenario: Scenario,
    pub states: Vec<VortexPairState>,
    pub frames: Vec<PointCloudFrame>,
    /// Published labels (true centers plus optional label noise).
    pub observed_centers: Vec<CenterPair>,
    pub relaxed_dropout: Vec<bool>,
}

impl SimulatedSequence {
    /// Exact centers in the reported site frame.
    pub fn true_centers(&self) -> Vec<CenterPair> {
        let o = self.scenario.site_offset;
        self.states.iter().map(|s| s.centers().map(|c| [c[0] + o[0], c[1] + o[1]])).collect()
    }

    pub fn to_scan_sequence(&self, labeled: bool) -> ScanSequence {
        ScanSequence {
            event_id: self.sequence_id.clone(),
            frames: self.frames.clone(),
            class_id: labeled.then_some(self.scenario.class_id),
            centers: labeled.then(|| self.observed_centers.clone()),
            centroid_removed: [0.0, 0.0],
        }
    }
}

pub fn sequence_id(index: usize) -> String {
    format!("seq_{index:05}")
}

pub fn simulate_sequence(index: usize, cfg: &SimConfig) -> Result<SimulatedSequence> {
    if cfg.n_frames == 0 {
        return Err(VortexError::Config("n_frames must be positive".into()));
    }
    let seq_seed = rng::derive_seed(cfg.seed, &[index as u64]);
    let scenario = sample_scenario(seq_seed, &cfg.catalog, cfg.n_frames)?;
    let states = scenario.trajectory()?;
    let mut render_rng = rng::stream(seq_seed, &[tag::RENDER]);
    let mut frames = Vec::with_capacity(states.len());
    let mut relaxed = Vec::with_capacity(states.len());
    for (k, s) in states.iter().enumerate() {
        let t = k as f64 * scenario.frame_interval;
        let (mut frame, flag) = render_scan(s, &cfg.geometry, &scenario, t, &mut render_rng)?;
        for p in &mut frame.points {
            p[0] += scenario.site_offset[0];
            p[1] += scenario.site_offset[1];
        }
        frames.push(frame);
        relaxed.push(flag);
    }
    let mut label_rng = rng::stream(seq_seed, &[tag::LABEL_NOISE]);
    let label_noise = Normal::new(0.0, cfg.label_noise_sigma.max(0.0)).map_err(|e| VortexError::Config(e.to_string()))?;
    let observed_centers = states
        .iter()
        .map(|s| {
            let mut c = s.centers().map(|c| [c[0] + scenario.site_offset[0], c[1] + scenario.site_offset[1]]);
            if cfg.label_noise_sigma > 0.0 {
                for v in c.iter_mut().flatten() {
                    *v += label_noise.sample(&mut label_rng);
                }
            }
            c
        })
        .collect();
    Ok(SimulatedSequence {
        sequence_id: sequence_id(index),
        scenario,
        states,
        frames,
        observed_centers,
        relaxed_dropout: relaxed,
    })
}

/// Simulates all sequences in memory. Output does not depend on thread count.
pub fn simulate_all(cfg: &SimConfig) -> Result<Vec<SimulatedSequence>> {
    cfg.geometry.validate()?;
    (0..cfg.n_sequences).into_par_iter().map(|i| simulate_sequence(i, cfg)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub n_sequences: usize,
    pub n_frames: usize,
    pub seed: u64,
    pub labeled: bool,
    pub label_noise_sigma: f64,
    pub sequences: Vec<String>,
}

/// Writes a dataset directory (see [`crate::io`] for the layout).
pub fn generate_dataset(cfg: &SimConfig, out_dir: &Path) -> Result<DatasetManifest> {
    let sims = simulate_all(cfg)?;
    fs::create_dir_all(out_dir)?;
    sims.par_iter().map(|s| io::write_simulated_sequence(out_dir, s, cfg.labeled)).collect::<Result<Vec<()>>>()?;
    io::write_oracle_labels(out_dir, &sims)?;
    let manifest = DatasetManifest {
        n_sequences: cfg.n_sequences,
        n_frames: cfg.n_frames,
        seed: cfg.seed,
        labeled: cfg.labeled,
        label_noise_sigma: cfg.label_noise_sigma,
        sequences: sims.iter().map(|s| s.sequence_id.clone()).collect(),
    };
    io::write_json(&out_dir.join(io::DATASET_MANIFEST), &manifest)?;
    Ok(manifest)
}
