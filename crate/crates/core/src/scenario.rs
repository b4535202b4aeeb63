//! Synthetic GNSS scenarios with ground truth.
//!
//! Geometry is a local ENU frame with satellites given by slowly drifting
//! azimuth/elevation. Ranges are modeled as affine in the receiver position,
//! so residuals against an anchor are exactly `los·(x − x0)` plus clock,
//! integer and noise terms. The base station of the double differences is
//! noiseless.

use std::collections::BTreeMap;
use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factors::{EpochRecord, GnssSystem, ObsFlags, SatObservation, SystemBiasLayout};

const SPEED_OF_LIGHT: f64 = 299_792_458.0;
pub const GPS_L1_HZ: f64 = 1_575.42e6;
pub const BDS_B1I_HZ: f64 = 1_561.098e6;

pub fn wavelength(system: GnssSystem, glonass_channel: i32) -> f64 {
    match system {
        GnssSystem::Gps | GnssSystem::Gal | GnssSystem::Qzs => SPEED_OF_LIGHT / GPS_L1_HZ,
        GnssSystem::Bds => SPEED_OF_LIGHT / BDS_B1I_HZ,
        GnssSystem::Glo => SPEED_OF_LIGHT / (1_602.0e6 + glonass_channel as f64 * 0.5625e6),
    }
}

/// Pseudorange sigma `√(a² + b²/sin²(el))`.
pub fn elevation_sigma(el: f64, a: f64, b: f64) -> Result<f64> {
    if el.is_nan() || el <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "elevation must be positive, got {el}"
        )));
    }
    let s = el.sin();
    Ok((a * a + b * b / (s * s)).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Trajectory {
    Static {
        position: [f64; 3],
    },
    ConstantVelocity {
        start: [f64; 3],
        velocity: [f64; 3],
    },
    /// Drives along the waypoints at constant speed and stops at the last.
    WaypointPolyline {
        waypoints: Vec<[f64; 3]>,
        speed: f64,
    },
}

impl Default for Trajectory {
    fn default() -> Self {
        Trajectory::Static { position: [0.0; 3] }
    }
}

impl Trajectory {
    fn validate(&self) -> Result<()> {
        match self {
            Trajectory::WaypointPolyline { waypoints, speed } => {
                if waypoints.is_empty() {
                    return Err(Error::Config("polyline needs at least one waypoint".into()));
                }
                if speed.is_nan() || *speed < 0.0 {
                    return Err(Error::Config("polyline speed must be non-negative".into()));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    fn velocity_at(&self, t: f64) -> Vector3<f64> {
        match self {
            Trajectory::Static { .. } => Vector3::zeros(),
            Trajectory::ConstantVelocity { velocity, .. } => Vector3::from(*velocity),
            Trajectory::WaypointPolyline { waypoints, speed } => {
                let mut s = speed * t;
                for w in waypoints.windows(2) {
                    let seg = Vector3::from(w[1]) - Vector3::from(w[0]);
                    let len = seg.norm();
                    if len == 0.0 {
                        continue;
                    }
                    if s < len {
                        return seg * (speed / len);
                    }
                    s -= len;
                }
                Vector3::zeros()
            }
        }
    }

    fn start(&self) -> Vector3<f64> {
        match self {
            Trajectory::Static { position } => Vector3::from(*position),
            Trajectory::ConstantVelocity { start, .. } => Vector3::from(*start),
            Trajectory::WaypointPolyline { waypoints, .. } => Vector3::from(waypoints[0]),
        }
    }

    /// Positions and velocities at `n` epochs, with positions integrated from
    /// velocities by the trapezoid rule.
    pub fn sample(&self, n: usize, dt: f64) -> Vec<(Vector3<f64>, Vector3<f64>)> {
        let mut out: Vec<(Vector3<f64>, Vector3<f64>)> = Vec::with_capacity(n);
        for i in 0..n {
            let v = self.velocity_at(i as f64 * dt);
            let x = match out.last() {
                None => self.start(),
                Some((xp, vp)) => xp + (vp + v) * (0.5 * dt),
            };
            out.push((x, v));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SatelliteSpec {
    pub sat_id: String,
    pub system: GnssSystem,
    /// Degrees.
    pub azimuth: f64,
    /// Degrees.
    pub elevation: f64,
    /// rad/s.
    #[serde(default)]
    pub azimuth_rate: f64,
    /// rad/s.
    #[serde(default)]
    pub elevation_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    /// Pseudorange base sigma, meters.
    pub psr_a: f64,
    /// Pseudorange elevation coefficient, meters.
    pub psr_b: f64,
    /// m/s.
    pub doppler: f64,
    /// Meters.
    pub phase: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            psr_a: 0.3,
            psr_b: 0.3,
            doppler: 0.05,
            phase: 0.003,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutlierConfig {
    /// Expected fraction of NLOS pseudoranges.
    pub nlos_prob: f64,
    /// Concentrates NLOS on low satellites: the per-satellite probability is
    /// proportional to `cos(el)^exponent`, scaled so that the epoch mean stays
    /// `nlos_prob`. Zero gives the same probability to every satellite.
    pub nlos_elevation_exponent: f64,
    pub bias_low: f64,
    pub bias_high: f64,
    pub cycle_slip_prob: f64,
}

impl Default for OutlierConfig {
    fn default() -> Self {
        Self {
            nlos_prob: 0.0,
            nlos_elevation_exponent: 0.0,
            bias_low: 5.0,
            bias_high: 50.0,
            cycle_slip_prob: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ClockConfig {
    /// Meters.
    pub offset: f64,
    /// m/s.
    pub drift: f64,
    /// Per-epoch random-walk sigma on the clock, meters.
    pub random_walk: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub n_epochs: usize,
    pub dt: f64,
    /// GPS time of the first epoch.
    pub start_time: f64,
    pub trajectory: Trajectory,
    pub constellation: Vec<SatelliteSpec>,
    pub noise: NoiseConfig,
    pub outliers: OutlierConfig,
    pub clock: ClockConfig,
    /// Constant inter-system biases relative to the reference system, meters.
    pub isb: BTreeMap<GnssSystem, f64>,
    /// Per-axis sigma of the anchor position error, meters.
    pub anchor_position_sigma: f64,
    /// Per-axis sigma of the anchor velocity error, m/s.
    pub anchor_velocity_sigma: f64,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            n_epochs: 10,
            dt: 1.0,
            start_time: 0.0,
            trajectory: Trajectory::default(),
            constellation: Vec::new(),
            noise: NoiseConfig::default(),
            outliers: OutlierConfig::default(),
            clock: ClockConfig::default(),
            isb: BTreeMap::new(),
            anchor_position_sigma: 1.0,
            anchor_velocity_sigma: 0.1,
            seed: 0,
        }
    }
}

fn prefix(system: GnssSystem) -> char {
    match system {
        GnssSystem::Gps => 'G',
        GnssSystem::Glo => 'R',
        GnssSystem::Gal => 'E',
        GnssSystem::Bds => 'C',
        GnssSystem::Qzs => 'J',
    }
}

fn random_constellation(
    rng: &mut ChaCha8Rng,
    systems: &[(GnssSystem, usize)],
    el_range: (f64, f64),
) -> Vec<SatelliteSpec> {
    let mut sats = Vec::new();
    let total: usize = systems.iter().map(|s| s.1).sum();
    // one azimuth sector per satellite, shuffled so systems interleave
    let mut sectors: Vec<usize> = (0..total).collect();
    sectors.shuffle(rng);
    let mut k = 0;
    for &(system, count) in systems {
        for j in 0..count {
            let base = 360.0 * sectors[k] as f64 / total as f64;
            sats.push(SatelliteSpec {
                sat_id: format!("{}{:02}", prefix(system), j + 1),
                system,
                azimuth: (base + rng.random_range(0.0..360.0 / total as f64)) % 360.0,
                elevation: rng.random_range(el_range.0..el_range.1),
                azimuth_rate: rng.random_range(-1e-4..1e-4),
                elevation_rate: rng.random_range(-5e-5..5e-5),
            });
            k += 1;
        }
    }
    sats
}

impl ScenarioConfig {
    /// Urban single-point scenario: 200 epochs along a city-block loop,
    /// 8 to 12 satellites from four systems, 20% NLOS pseudoranges.
    pub fn urban_example1(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0001);
        let n_sats = rng.random_range(8..=12usize);
        let systems = [
            GnssSystem::Gps,
            GnssSystem::Glo,
            GnssSystem::Gal,
            GnssSystem::Bds,
        ];
        let mut counts = [2usize; 4];
        for _ in 8..n_sats {
            counts[rng.random_range(0..4)] += 1;
        }
        let plan: Vec<_> = systems.iter().copied().zip(counts).collect();
        let constellation = random_constellation(&mut rng, &plan, (10.0, 85.0));
        let mut isb = BTreeMap::new();
        isb.insert(GnssSystem::Glo, 12.0);
        isb.insert(GnssSystem::Gal, 3.0);
        isb.insert(GnssSystem::Bds, -7.0);
        Self {
            n_epochs: 200,
            dt: 1.0,
            start_time: 0.0,
            trajectory: Trajectory::WaypointPolyline {
                waypoints: vec![
                    [0.0, 0.0, 0.0],
                    [400.0, 0.0, 0.0],
                    [400.0, 300.0, 0.0],
                    [0.0, 300.0, 0.0],
                    [0.0, 0.0, 0.0],
                ],
                speed: 8.0,
            },
            constellation,
            noise: NoiseConfig {
                psr_a: 0.3,
                psr_b: 0.3,
                doppler: 0.05,
                phase: 0.003,
            },
            outliers: OutlierConfig {
                nlos_prob: 0.2,
                nlos_elevation_exponent: 6.0,
                bias_low: 5.0,
                bias_high: 50.0,
                cycle_slip_prob: 0.0,
            },
            clock: ClockConfig {
                offset: 150.0,
                drift: 0.0,
                random_walk: 0.0,
            },
            isb,
            anchor_position_sigma: 3.0,
            anchor_velocity_sigma: 0.2,
            seed,
        }
    }

    /// Carrier-phase scenario: GPS and Galileo, five satellites each,
    /// 3 mm phase noise, no outliers and no slips.
    pub fn rtk_example2(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0002);
        let plan = [(GnssSystem::Gps, 5), (GnssSystem::Gal, 5)];
        let constellation = random_constellation(&mut rng, &plan, (15.0, 85.0));
        let mut isb = BTreeMap::new();
        isb.insert(GnssSystem::Gal, 3.0);
        Self {
            n_epochs: 60,
            dt: 1.0,
            start_time: 0.0,
            trajectory: Trajectory::ConstantVelocity {
                start: [0.0, 0.0, 0.0],
                velocity: [6.0, 3.0, 0.0],
            },
            constellation,
            noise: NoiseConfig {
                psr_a: 0.5,
                psr_b: 0.5,
                doppler: 0.05,
                phase: 0.003,
            },
            outliers: OutlierConfig {
                nlos_prob: 0.0,
                nlos_elevation_exponent: 0.0,
                bias_low: 5.0,
                bias_high: 50.0,
                cycle_slip_prob: 0.0,
            },
            clock: ClockConfig {
                offset: 80.0,
                drift: 0.3,
                random_walk: 0.05,
            },
            isb,
            anchor_position_sigma: 2.0,
            anchor_velocity_sigma: 0.2,
            seed,
        }
    }

    /// Same geometry and truth with every noise source, outlier and anchor
    /// error switched off.
    pub fn noiseless(mut self) -> Self {
        self.noise = NoiseConfig {
            psr_a: 0.0,
            psr_b: 0.0,
            doppler: 0.0,
            phase: 0.0,
        };
        self.outliers.nlos_prob = 0.0;
        self.outliers.cycle_slip_prob = 0.0;
        self.clock.random_walk = 0.0;
        self.anchor_position_sigma = 0.0;
        self.anchor_velocity_sigma = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |p: f64, name: &str| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")))
            }
        };
        if self.n_epochs == 0 {
            return Err(Error::Config("n_epochs must be at least 1".into()));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Config(format!(
                "dt must be positive, got {}",
                self.dt
            )));
        }
        prob(self.outliers.nlos_prob, "nlos_prob")?;
        prob(self.outliers.cycle_slip_prob, "cycle_slip_prob")?;
        let o = &self.outliers;
        if !(o.bias_low >= 0.0 && o.bias_high >= o.bias_low) {
            return Err(Error::Config(format!(
                "NLOS bias range [{}, {}] must satisfy 0 <= low <= high",
                o.bias_low, o.bias_high
            )));
        }
        let n = &self.noise;
        for (v, name) in [
            (n.psr_a, "psr_a"),
            (n.psr_b, "psr_b"),
            (n.doppler, "doppler"),
            (n.phase, "phase"),
            (self.clock.random_walk, "random_walk"),
            (self.anchor_position_sigma, "anchor_position_sigma"),
            (self.anchor_velocity_sigma, "anchor_velocity_sigma"),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} must be non-negative, got {v}"
                )));
            }
        }
        if self.constellation.is_empty() {
            return Err(Error::Config("constellation is empty".into()));
        }
        let mut ids = std::collections::BTreeSet::new();
        for s in &self.constellation {
            if !ids.insert(&s.sat_id) {
                return Err(Error::Config(format!("duplicate satellite {}", s.sat_id)));
            }
        }
        self.trajectory.validate()
    }

    pub fn layout(&self) -> SystemBiasLayout {
        SystemBiasLayout::from_systems(self.constellation.iter().map(|s| s.system))
    }
}

/// Per-satellite truth at one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthSat {
    pub sat_id: String,
    /// Undifferenced integer ambiguity, cycles.
    pub integer: i64,
    /// Double-differenced integer against the system reference; `None` for
    /// the reference itself and for systems without carrier differencing.
    pub dd_integer: Option<i64>,
    /// Identifier of the slip-free double-difference arc.
    pub arc: usize,
    pub nlos: bool,
    pub slip: bool,
    /// Total pseudorange error (noise plus NLOS delay), meters.
    pub psr_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthEpoch {
    pub epoch: usize,
    pub time: f64,
    pub position: [f64; 3],
    pub velocity: [f64; 3],
    /// `[clock, inter-system biases…]` in the layout order.
    pub clock: Vec<f64>,
    pub drift: f64,
    pub sats: Vec<TruthSat>,
}

impl TruthEpoch {
    pub fn sat(&self, sat_id: &str) -> Option<&TruthSat> {
        self.sats.iter().find(|s| s.sat_id == sat_id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub layout: SystemBiasLayout,
    pub epochs: Vec<TruthEpoch>,
}

impl GroundTruth {
    pub fn positions(&self) -> Vec<[f64; 3]> {
        self.epochs.iter().map(|e| e.position).collect()
    }
}

struct SatState {
    integer: i64,
    prev_phase_res: Option<f64>,
    visible_prev: bool,
    glonass_channel: i32,
}

/// Synthesizes epoch records and ground truth from `cfg`.
pub fn generate(cfg: &ScenarioConfig) -> Result<(Vec<EpochRecord>, GroundTruth)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let layout = cfg.layout();
    let traj = cfg.trajectory.sample(cfg.n_epochs, cfg.dt);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");

    let mut states: Vec<SatState> = cfg
        .constellation
        .iter()
        .enumerate()
        .map(|(k, _)| SatState {
            integer: rng.random_range(-30..=30),
            prev_phase_res: None,
            visible_prev: false,
            glonass_channel: (k as i32 % 14) - 7,
        })
        .collect();

    let mut references: BTreeMap<GnssSystem, String> = BTreeMap::new();
    let mut arcs: BTreeMap<String, usize> = BTreeMap::new();
    let mut next_arc = 0usize;
    let mut dd_arcs: BTreeMap<(usize, usize), usize> = BTreeMap::new();

    let mut clock = cfg.clock.offset;
    let drift = cfg.clock.drift;
    let mut records = Vec::with_capacity(cfg.n_epochs);
    let mut truth_epochs = Vec::with_capacity(cfg.n_epochs);

    for (i, (x, v)) in traj.iter().enumerate() {
        let t = i as f64 * cfg.dt;
        if i > 0 {
            clock += cfg.dt * drift + cfg.clock.random_walk * std_normal.sample(&mut rng);
        }
        let mut cvec = vec![clock];
        for sys in &layout.others {
            cvec.push(cfg.isb.get(sys).copied().unwrap_or(0.0));
        }
        let cvec_n = nalgebra::DVector::from_vec(cvec.clone());

        let x0 = x + gaussian3(&mut rng, &std_normal, cfg.anchor_position_sigma);
        let v0 = v + gaussian3(&mut rng, &std_normal, cfg.anchor_velocity_sigma);

        let mut sats = Vec::new();
        let mut tsats = Vec::new();
        let mut phase_res: BTreeMap<String, f64> = BTreeMap::new();

        let geometry: Vec<(f64, f64)> = cfg
            .constellation
            .iter()
            .map(|s| {
                (
                    s.azimuth.to_radians() + s.azimuth_rate * t,
                    s.elevation.to_radians() + s.elevation_rate * t,
                )
            })
            .collect();
        let nlos_weight = |el: f64| el.cos().powf(cfg.outliers.nlos_elevation_exponent);
        let visible_w: Vec<f64> = geometry
            .iter()
            .filter(|g| g.1 > 0.0 && g.1 <= FRAC_PI_2)
            .map(|g| nlos_weight(g.1))
            .collect();
        let mean_w = visible_w.iter().sum::<f64>() / visible_w.len().max(1) as f64;

        for ((spec, st), &(az, el)) in cfg
            .constellation
            .iter()
            .zip(states.iter_mut())
            .zip(&geometry)
        {
            let visible = el > 0.0 && el <= FRAC_PI_2;
            if !visible {
                st.visible_prev = false;
                st.prev_phase_res = None;
                continue;
            }
            let az = az.rem_euclid(2.0 * PI);
            let los = -Vector3::new(el.cos() * az.sin(), el.cos() * az.cos(), el.sin());
            let hc = layout.clock_row(spec.system)?;
            let clock_term = hc.dot(&cvec_n);
            let geom = los.dot(&(x - x0));

            let sigma = elevation_sigma(el, cfg.noise.psr_a, cfg.noise.psr_b)?;
            let p_nlos = if cfg.outliers.nlos_elevation_exponent != 0.0 && mean_w > 0.0 {
                (cfg.outliers.nlos_prob * nlos_weight(el) / mean_w).min(1.0)
            } else {
                cfg.outliers.nlos_prob
            };
            let nlos = p_nlos > 0.0 && rng.random::<f64>() < p_nlos;
            let psr_error = if nlos {
                if cfg.outliers.bias_high > cfg.outliers.bias_low {
                    rng.random_range(cfg.outliers.bias_low..cfg.outliers.bias_high)
                } else {
                    cfg.outliers.bias_low
                }
            } else {
                truncated_normal(&mut rng, &std_normal, 6.0) * sigma
            };

            let dopp_noise = cfg.noise.doppler * std_normal.sample(&mut rng);

            let slip = st.visible_prev
                && cfg.outliers.cycle_slip_prob > 0.0
                && rng.random::<f64>() < cfg.outliers.cycle_slip_prob;
            if slip {
                let jump = rng.random_range(1..=5i64);
                st.integer += if rng.random::<bool>() { jump } else { -jump };
            }
            let lambda = wavelength(spec.system, st.glonass_channel);
            let phase_noise = cfg.noise.phase * std_normal.sample(&mut rng);
            let phi_res = geom + clock_term + lambda * st.integer as f64 + phase_noise;

            let has_tdcp = st.visible_prev && !slip && st.prev_phase_res.is_some();
            let tdcp_residual = match (has_tdcp, st.prev_phase_res) {
                (true, Some(p)) => phi_res - p,
                _ => 0.0,
            };
            let snr_drop = if nlos {
                rng.random_range(3.0..10.0)
            } else {
                0.0
            };
            let snr = 35.0 + 15.0 * el.sin() + 1.5 * std_normal.sample(&mut rng) - snr_drop;

            if slip || !st.visible_prev {
                arcs.insert(spec.sat_id.clone(), next_arc);
                next_arc += 1;
            }
            st.visible_prev = true;
            st.prev_phase_res = Some(phi_res);
            phase_res.insert(spec.sat_id.clone(), phi_res);

            sats.push(SatObservation {
                sat_id: spec.sat_id.clone(),
                system: spec.system,
                elevation: el,
                azimuth: az,
                los_unit: [los.x, los.y, los.z],
                psr_residual: geom + clock_term + psr_error,
                dopp_residual: los.dot(v) + drift + dopp_noise,
                tdcp_residual,
                dd_carrier_residual: 0.0,
                wavelength: lambda,
                snr,
                flags: ObsFlags {
                    has_psr: true,
                    has_dopp: true,
                    has_tdcp,
                    has_ddcp: spec.system != GnssSystem::Glo,
                    cycle_slip: slip,
                },
            });
            tsats.push(TruthSat {
                sat_id: spec.sat_id.clone(),
                integer: st.integer,
                dd_integer: None,
                arc: 0,
                nlos,
                slip,
                psr_error,
            });
        }

        if sats.len() < 4 {
            return Err(Error::UnderDetermined {
                epoch: i,
                visible: sats.len(),
            });
        }

        // keep each system's reference while it stays visible
        let systems: std::collections::BTreeSet<GnssSystem> =
            sats.iter().map(|s| s.system).collect();
        references.retain(|sys, id| systems.contains(sys) && sats.iter().any(|s| &s.sat_id == id));
        for sys in &systems {
            if !references.contains_key(sys) {
                let best = sats
                    .iter()
                    .filter(|s| s.system == *sys)
                    .max_by(|a, b| a.elevation.total_cmp(&b.elevation))
                    .expect("system has a satellite");
                references.insert(*sys, best.sat_id.clone());
            }
        }

        for (obs, ts) in sats.iter_mut().zip(tsats.iter_mut()) {
            let ref_id = &references[&obs.system];
            let ref_idx = cfg
                .constellation
                .iter()
                .position(|s| &s.sat_id == ref_id)
                .expect("reference in constellation");
            if obs.flags.has_ddcp && &obs.sat_id != ref_id {
                obs.dd_carrier_residual = phase_res[&obs.sat_id] - phase_res[ref_id];
                ts.dd_integer = Some(ts.integer - states[ref_idx].integer);
            }
        }

        // a double-difference arc is identified by the undifferenced arcs of
        // the satellite and of its reference
        for (obs, ts) in sats.iter().zip(tsats.iter_mut()) {
            let pair = (arcs[&obs.sat_id], arcs[&references[&obs.system]]);
            let n = dd_arcs.len();
            ts.arc = *dd_arcs.entry(pair).or_insert(n);
        }

        records.push(EpochRecord {
            epoch: i,
            time: cfg.start_time + t,
            anchor_position: [x0.x, x0.y, x0.z],
            anchor_velocity: [v0.x, v0.y, v0.z],
            dt_prev: if i == 0 { 0.0 } else { cfg.dt },
            sats,
            reference_sat: references.clone(),
        });
        truth_epochs.push(TruthEpoch {
            epoch: i,
            time: cfg.start_time + t,
            position: [x.x, x.y, x.z],
            velocity: [v.x, v.y, v.z],
            clock: cvec,
            drift,
            sats: tsats,
        });
    }

    Ok((
        records,
        GroundTruth {
            layout,
            epochs: truth_epochs,
        },
    ))
}

fn gaussian3(rng: &mut ChaCha8Rng, n: &Normal<f64>, sigma: f64) -> Vector3<f64> {
    if sigma == 0.0 {
        return Vector3::zeros();
    }
    Vector3::new(n.sample(rng), n.sample(rng), n.sample(rng)) * sigma
}

fn truncated_normal(rng: &mut ChaCha8Rng, n: &Normal<f64>, bound: f64) -> f64 {
    loop {
        let z = n.sample(rng);
        if z.abs() <= bound {
            return z;
        }
    }
}

/// Observations removed by [`apply_masks`].
#[derive(Debug, Clone, PartialEq)]
pub struct MaskOutcome {
    pub record: EpochRecord,
    pub removed: Vec<String>,
}

/// Drops observations with SNR below `snr_min` (dB-Hz) or elevation below
/// `el_min` (radians). A masked-out reference satellite loses its
/// reference role.
pub fn apply_masks(record: &EpochRecord, snr_min: f64, el_min: f64) -> MaskOutcome {
    let mut out = record.clone();
    let mut removed = Vec::new();
    out.sats.retain(|s| {
        let keep = s.snr >= snr_min && s.elevation >= el_min;
        if !keep {
            removed.push(s.sat_id.clone());
        }
        keep
    });
    out.reference_sat.retain(|_, id| !removed.contains(id));
    MaskOutcome {
        record: out,
        removed,
    }
}
