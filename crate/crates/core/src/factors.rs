//! Observation types and GNSS factor constructors.
//!
//! Observations arrive preprocessed: each [`SatObservation`] carries the
//! observed-minus-computed residuals at the epoch anchor and the unit
//! line-of-sight vector. `los_unit` is the gradient of the geometric range
//! with respect to the receiver position, so the linearized range is
//! `r(x0 + δx) ≈ r(x0) + los·δx`.
//!
//! Sign convention for every factor: `e = prediction − observation term`.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Anchor, Factor, FactorKind, VariableKey};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum GnssSystem {
    #[serde(rename = "GPS")]
    Gps,
    #[serde(rename = "GLO")]
    Glo,
    #[serde(rename = "GAL")]
    Gal,
    #[serde(rename = "BDS")]
    Bds,
    #[serde(rename = "QZS")]
    Qzs,
}

impl fmt::Display for GnssSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            GnssSystem::Gps => "GPS",
            GnssSystem::Glo => "GLO",
            GnssSystem::Gal => "GAL",
            GnssSystem::Bds => "BDS",
            GnssSystem::Qzs => "QZS",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ObsFlags {
    pub has_psr: bool,
    pub has_dopp: bool,
    pub has_tdcp: bool,
    pub has_ddcp: bool,
    pub cycle_slip: bool,
}

/// One satellite's preprocessed observations at one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SatObservation {
    pub sat_id: String,
    pub system: GnssSystem,
    /// Radians.
    pub elevation: f64,
    /// Radians.
    pub azimuth: f64,
    pub los_unit: [f64; 3],
    /// ρ − r(x0) − ε, meters.
    pub psr_residual: f64,
    /// ρ̇ − los·v_s − ṫ_s, m/s.
    pub dopp_residual: f64,
    /// λΔΦ − Δr(x0) − Δt_s, meters; ranges of both epochs at their own anchors.
    pub tdcp_residual: f64,
    /// λ∇ΔΦ − ∇Δr(x0) against the system's reference satellite, meters.
    pub dd_carrier_residual: f64,
    /// Carrier wavelength, meters.
    pub wavelength: f64,
    /// Carrier-to-noise density, dB-Hz.
    pub snr: f64,
    pub flags: ObsFlags,
}

impl SatObservation {
    pub fn los(&self) -> Vector3<f64> {
        Vector3::from(self.los_unit)
    }
}

/// Preprocessed observations of one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// GPS time, seconds.
    pub time: f64,
    pub anchor_position: [f64; 3],
    pub anchor_velocity: [f64; 3],
    /// Seconds since the previous epoch; 0 for the first.
    pub dt_prev: f64,
    pub sats: Vec<SatObservation>,
    #[serde(default)]
    pub reference_sat: BTreeMap<GnssSystem, String>,
}

impl EpochRecord {
    pub fn anchor(&self) -> Anchor {
        Anchor {
            position: self.anchor_position,
            velocity: self.anchor_velocity,
        }
    }

    pub fn sat(&self, sat_id: &str) -> Option<&SatObservation> {
        self.sats.iter().find(|s| s.sat_id == sat_id)
    }

    pub fn reference_for(&self, system: GnssSystem) -> Option<&SatObservation> {
        self.reference_sat.get(&system).and_then(|id| self.sat(id))
    }

    /// Checks the record-level invariants.
    pub fn validate(&self) -> Result<()> {
        if self.epoch > 0 && (self.dt_prev.is_nan() || self.dt_prev <= 0.0) {
            return Err(Error::InvalidInput(format!(
                "epoch {}: dt_prev must be positive",
                self.epoch
            )));
        }
        let mut ids = std::collections::BTreeSet::new();
        for s in &self.sats {
            if !ids.insert(s.sat_id.as_str()) {
                return Err(Error::InvalidInput(format!(
                    "epoch {}: duplicate satellite {}",
                    self.epoch, s.sat_id
                )));
            }
            if (s.los().norm() - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidInput(format!(
                    "epoch {}: satellite {} line of sight is not a unit vector",
                    self.epoch, s.sat_id
                )));
            }
            if !(s.elevation > 0.0 && s.elevation <= std::f64::consts::FRAC_PI_2) {
                return Err(Error::InvalidInput(format!(
                    "epoch {}: satellite {} elevation {} out of range",
                    self.epoch, s.sat_id, s.elevation
                )));
            }
        }
        Ok(())
    }
}

/// Receiver clock layout: one clock for the reference system plus one
/// inter-system bias per other system.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SystemBiasLayout {
    pub reference: GnssSystem,
    pub others: Vec<GnssSystem>,
}

impl Default for SystemBiasLayout {
    fn default() -> Self {
        Self {
            reference: GnssSystem::Gps,
            others: Vec::new(),
        }
    }
}

impl SystemBiasLayout {
    pub fn new(reference: GnssSystem, mut others: Vec<GnssSystem>) -> Self {
        others.retain(|s| *s != reference);
        others.sort();
        others.dedup();
        Self { reference, others }
    }

    /// GPS as reference when present, otherwise the first system seen.
    pub fn from_systems(systems: impl IntoIterator<Item = GnssSystem>) -> Self {
        let mut all: Vec<GnssSystem> = systems.into_iter().collect();
        all.sort();
        all.dedup();
        let reference = if all.contains(&GnssSystem::Gps) || all.is_empty() {
            GnssSystem::Gps
        } else {
            all[0]
        };
        Self::new(reference, all)
    }

    pub fn from_records(records: &[EpochRecord]) -> Self {
        Self::from_systems(records.iter().flat_map(|r| r.sats.iter().map(|s| s.system)))
    }

    pub fn clock_dim(&self) -> usize {
        1 + self.others.len()
    }

    /// The clock observation row `H_c = [1, δ_sys…]`.
    pub fn clock_row(&self, system: GnssSystem) -> Result<DVector<f64>> {
        let mut row = DVector::zeros(self.clock_dim());
        row[0] = 1.0;
        if system != self.reference {
            let idx = self
                .others
                .iter()
                .position(|s| *s == system)
                .ok_or_else(|| {
                    Error::InvalidInput(format!("system {system} not in clock layout"))
                })?;
            row[1 + idx] = 1.0;
        }
        Ok(row)
    }
}

fn row3(v: &Vector3<f64>) -> DMatrix<f64> {
    DMatrix::from_row_slice(1, 3, v.as_slice())
}

fn row_of(v: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_row_slice(1, v.len(), v.as_slice())
}

fn scalar(x: f64) -> DVector<f64> {
    DVector::from_element(1, x)
}

fn require(obs: &SatObservation, present: bool, what: &'static str) -> Result<()> {
    if present {
        Ok(())
    } else {
        Err(Error::MissingObservation {
            sat: obs.sat_id.clone(),
            what,
        })
    }
}

fn check_pair(
    obs: &SatObservation,
    reference: &SatObservation,
    allow_cross_system: bool,
) -> Result<()> {
    if obs.sat_id == reference.sat_id {
        return Err(Error::InvalidInput(format!(
            "satellite {} differenced against itself",
            obs.sat_id
        )));
    }
    if obs.system != reference.system && !allow_cross_system {
        return Err(Error::InvalidInput(format!(
            "cross-system difference {} ({}) - {} ({}) not allowed",
            obs.sat_id, obs.system, reference.sat_id, reference.system
        )));
    }
    Ok(())
}

fn check_epoch(epoch: usize) -> Result<()> {
    if epoch == 0 {
        Err(Error::NoPredecessor(epoch))
    } else {
        Ok(())
    }
}

/// Pseudorange factor over `(δx_i, c_i)`.
pub fn pseudorange_factor(
    obs: &SatObservation,
    epoch: usize,
    layout: &SystemBiasLayout,
    sigma: f64,
) -> Result<Factor> {
    require(obs, obs.flags.has_psr, "pseudorange")?;
    let hc = layout.clock_row(obs.system)?;
    Factor::with_uniform_sigma(
        FactorKind::Pseudorange,
        vec![
            VariableKey::position(epoch),
            VariableKey::clock(epoch, layout.clock_dim()),
        ],
        vec![row3(&obs.los()), row_of(&hc)],
        scalar(obs.psr_residual),
        sigma,
    )
}

/// Satellite-differenced pseudorange factor over `δx_i`; the receiver
/// clock cancels.
pub fn pseudorange_sd_factor(
    obs: &SatObservation,
    reference: &SatObservation,
    epoch: usize,
    sigma: f64,
    allow_cross_system: bool,
) -> Result<Factor> {
    require(obs, obs.flags.has_psr, "pseudorange")?;
    require(reference, reference.flags.has_psr, "pseudorange")?;
    check_pair(obs, reference, allow_cross_system)?;
    Factor::with_uniform_sigma(
        FactorKind::PseudorangeSd,
        vec![VariableKey::position(epoch)],
        vec![row3(&(obs.los() - reference.los()))],
        scalar(obs.psr_residual - reference.psr_residual),
        sigma,
    )
}

/// Doppler factor over `(δv_i, d_i)`. The anchor velocity is moved into
/// the constant so the state is the velocity error.
pub fn doppler_velocity_factor(
    obs: &SatObservation,
    epoch: usize,
    anchor_velocity: &Vector3<f64>,
    sigma: f64,
) -> Result<Factor> {
    require(obs, obs.flags.has_dopp, "Doppler")?;
    let los = obs.los();
    Factor::with_uniform_sigma(
        FactorKind::DopplerVelocity,
        vec![VariableKey::velocity(epoch), VariableKey::drift(epoch)],
        vec![row3(&los), DMatrix::from_element(1, 1, 1.0)],
        scalar(obs.dopp_residual - los.dot(anchor_velocity)),
        sigma,
    )
}

/// Satellite-differenced Doppler factor over `δv_i`; the clock drift
/// cancels.
pub fn doppler_velocity_sd_factor(
    obs: &SatObservation,
    reference: &SatObservation,
    epoch: usize,
    anchor_velocity: &Vector3<f64>,
    sigma: f64,
    allow_cross_system: bool,
) -> Result<Factor> {
    require(obs, obs.flags.has_dopp, "Doppler")?;
    require(reference, reference.flags.has_dopp, "Doppler")?;
    check_pair(obs, reference, allow_cross_system)?;
    let h = obs.los() - reference.los();
    let constant = (obs.dopp_residual - obs.los().dot(anchor_velocity))
        - (reference.dopp_residual - reference.los().dot(anchor_velocity));
    Factor::with_uniform_sigma(
        FactorKind::DopplerVelocitySd,
        vec![VariableKey::velocity(epoch)],
        vec![row3(&h)],
        scalar(constant),
        sigma,
    )
}

/// Doppler averaged over the interval between two epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct AveragedDoppler {
    pub sat_id: String,
    pub system: GnssSystem,
    /// Arithmetic mean of the two line-of-sight vectors (not renormalized).
    pub los: Vector3<f64>,
    /// Mean Doppler residual, m/s.
    pub residual: f64,
}

impl AveragedDoppler {
    pub fn from_pair(prev: &SatObservation, cur: &SatObservation) -> Result<Self> {
        if prev.sat_id != cur.sat_id {
            return Err(Error::InvalidInput(format!(
                "cannot average Doppler of {} and {}",
                prev.sat_id, cur.sat_id
            )));
        }
        require(prev, prev.flags.has_dopp, "Doppler")?;
        require(cur, cur.flags.has_dopp, "Doppler")?;
        Ok(Self {
            sat_id: cur.sat_id.clone(),
            system: cur.system,
            los: (prev.los() + cur.los()) * 0.5,
            residual: 0.5 * (prev.dopp_residual + cur.dopp_residual),
        })
    }
}

/// Integrated-Doppler factor over `(δx_{i−1}, δx_i, c_{i−1}, c_i)`.
///
/// `e = los·(δx_i − δx_{i−1}) + H_c·(c_i − c_{i−1}) − [Δt·ρ̄̇ − los·(x0_i − x0_{i−1})]`
pub fn doppler_tdpos_factor(
    avg: &AveragedDoppler,
    epoch: usize,
    dt: f64,
    prev_anchor: &Anchor,
    anchor: &Anchor,
    layout: &SystemBiasLayout,
    sigma: f64,
) -> Result<Factor> {
    check_epoch(epoch)?;
    check_dt(dt)?;
    let hc = layout.clock_row(avg.system)?;
    let dim = layout.clock_dim();
    let constant = dt * avg.residual - avg.los.dot(&(anchor.position() - prev_anchor.position()));
    Factor::with_uniform_sigma(
        FactorKind::DopplerTdPos,
        vec![
            VariableKey::position(epoch - 1),
            VariableKey::position(epoch),
            VariableKey::clock(epoch - 1, dim),
            VariableKey::clock(epoch, dim),
        ],
        vec![row3(&-avg.los), row3(&avg.los), row_of(&-&hc), row_of(&hc)],
        scalar(constant),
        sigma,
    )
}

/// Satellite-differenced integrated-Doppler factor over `(δx_{i−1}, δx_i)`.
#[allow(clippy::too_many_arguments)]
pub fn doppler_tdpos_sd_factor(
    avg: &AveragedDoppler,
    avg_ref: &AveragedDoppler,
    epoch: usize,
    dt: f64,
    prev_anchor: &Anchor,
    anchor: &Anchor,
    sigma: f64,
    allow_cross_system: bool,
) -> Result<Factor> {
    check_epoch(epoch)?;
    check_dt(dt)?;
    if avg.sat_id == avg_ref.sat_id {
        return Err(Error::InvalidInput(format!(
            "satellite {} differenced against itself",
            avg.sat_id
        )));
    }
    if avg.system != avg_ref.system && !allow_cross_system {
        return Err(Error::InvalidInput(
            "cross-system difference not allowed".into(),
        ));
    }
    let h = avg.los - avg_ref.los;
    let constant = dt * (avg.residual - avg_ref.residual)
        - h.dot(&(anchor.position() - prev_anchor.position()));
    Factor::with_uniform_sigma(
        FactorKind::DopplerTdPosSd,
        vec![
            VariableKey::position(epoch - 1),
            VariableKey::position(epoch),
        ],
        vec![row3(&-h), row3(&h)],
        scalar(constant),
        sigma,
    )
}

fn check_dt(dt: f64) -> Result<()> {
    if dt > 0.0 && dt.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!(
            "time step must be positive, got {dt}"
        )))
    }
}

fn check_carrier(obs: &SatObservation) -> Result<()> {
    if obs.wavelength > 0.0 && obs.wavelength.is_finite() {
        Ok(())
    } else {
        Err(Error::MissingObservation {
            sat: obs.sat_id.clone(),
            what: "carrier wavelength",
        })
    }
}

/// TDCP factor over `(δx_{i−1}, δx_i, c_{i−1}, c_i)`.
///
/// Each epoch's range enters with its own line of sight:
/// `e = los_i·δx_i − los_{i−1}·δx_{i−1} + H_c·Δc − tdcp_residual`.
pub fn tdcp_factor(
    prev: &SatObservation,
    obs: &SatObservation,
    epoch: usize,
    layout: &SystemBiasLayout,
    sigma: f64,
) -> Result<Factor> {
    check_epoch(epoch)?;
    require(obs, obs.flags.has_tdcp, "TDCP")?;
    check_carrier(obs)?;
    if prev.sat_id != obs.sat_id {
        return Err(Error::InvalidInput(format!(
            "TDCP pair mixes {} and {}",
            prev.sat_id, obs.sat_id
        )));
    }
    let hc = layout.clock_row(obs.system)?;
    let dim = layout.clock_dim();
    Factor::with_uniform_sigma(
        FactorKind::Tdcp,
        vec![
            VariableKey::position(epoch - 1),
            VariableKey::position(epoch),
            VariableKey::clock(epoch - 1, dim),
            VariableKey::clock(epoch, dim),
        ],
        vec![
            row3(&-prev.los()),
            row3(&obs.los()),
            row_of(&-&hc),
            row_of(&hc),
        ],
        scalar(obs.tdcp_residual),
        sigma,
    )
}

/// Satellite-differenced TDCP factor over `(δx_{i−1}, δx_i)`.
pub fn tdcp_sd_factor(
    prev: &SatObservation,
    prev_ref: &SatObservation,
    obs: &SatObservation,
    reference: &SatObservation,
    epoch: usize,
    sigma: f64,
    allow_cross_system: bool,
) -> Result<Factor> {
    check_epoch(epoch)?;
    require(obs, obs.flags.has_tdcp, "TDCP")?;
    require(reference, reference.flags.has_tdcp, "TDCP")?;
    check_carrier(obs)?;
    check_carrier(reference)?;
    check_pair(obs, reference, allow_cross_system)?;
    if prev.sat_id != obs.sat_id || prev_ref.sat_id != reference.sat_id {
        return Err(Error::InvalidInput(
            "TDCP pairs must track the same satellites".into(),
        ));
    }
    Factor::with_uniform_sigma(
        FactorKind::TdcpSd,
        vec![
            VariableKey::position(epoch - 1),
            VariableKey::position(epoch),
        ],
        vec![
            row3(&-(prev.los() - prev_ref.los())),
            row3(&(obs.los() - reference.los())),
        ],
        scalar(obs.tdcp_residual - reference.tdcp_residual),
        sigma,
    )
}

/// Double-differenced carrier-phase factor over `(δx_i, B)`.
///
/// `e = (los_k − los_l)·δx_i + λ·B[slot] − dd_carrier_residual`, with the
/// ambiguity in cycles.
pub fn dd_carrier_factor(
    obs: &SatObservation,
    reference: &SatObservation,
    epoch: usize,
    ambiguity: VariableKey,
    slot: usize,
    sigma: f64,
) -> Result<Factor> {
    require(obs, obs.flags.has_ddcp, "DD carrier")?;
    check_carrier(obs)?;
    check_pair(obs, reference, false)?;
    if slot >= ambiguity.dim {
        return Err(Error::SlotOutOfRange {
            slot,
            dim: ambiguity.dim,
        });
    }
    let mut jb = DMatrix::zeros(1, ambiguity.dim);
    jb[(0, slot)] = obs.wavelength;
    Factor::with_uniform_sigma(
        FactorKind::DdCarrier,
        vec![VariableKey::position(epoch), ambiguity],
        vec![row3(&(obs.los() - reference.los())), jb],
        scalar(obs.dd_carrier_residual),
        sigma,
    )
}

/// Motion factor over `(δx_{i−1}, δx_i, δv_{i−1}, δv_i)`:
/// the position change equals the trapezoidal integral of velocity.
pub fn motion_factor(
    epoch: usize,
    dt: f64,
    prev_anchor: &Anchor,
    anchor: &Anchor,
    sigma: f64,
) -> Result<Factor> {
    check_epoch(epoch)?;
    check_dt(dt)?;
    let eye = DMatrix::<f64>::identity(3, 3);
    let half = eye.clone() * (0.5 * dt);
    let constant = (prev_anchor.velocity() + anchor.velocity()) * (0.5 * dt)
        - (anchor.position() - prev_anchor.position());
    Factor::with_uniform_sigma(
        FactorKind::Motion,
        vec![
            VariableKey::position(epoch - 1),
            VariableKey::position(epoch),
            VariableKey::velocity(epoch - 1),
            VariableKey::velocity(epoch),
        ],
        vec![-eye.clone(), eye, -half.clone(), -half],
        DVector::from_column_slice(constant.as_slice()),
        sigma,
    )
}

/// Clock factor over `(c_{i−1}, c_i, d_{i−1}, d_i)`. The drift acts on the
/// reference clock only; inter-system bias rows are constancy rows.
pub fn clock_factor(
    epoch: usize,
    dt: f64,
    clock_dim: usize,
    sigma_clock: f64,
    sigma_isb: f64,
) -> Result<Factor> {
    check_epoch(epoch)?;
    check_dt(dt)?;
    let eye = DMatrix::<f64>::identity(clock_dim, clock_dim);
    let mut jd = DMatrix::zeros(clock_dim, 1);
    jd[(0, 0)] = -0.5 * dt;
    let mut sigma = DVector::from_element(clock_dim, sigma_isb);
    sigma[0] = sigma_clock;
    Factor::new(
        FactorKind::Clock,
        vec![
            VariableKey::clock(epoch - 1, clock_dim),
            VariableKey::clock(epoch, clock_dim),
            VariableKey::drift(epoch - 1),
            VariableKey::drift(epoch),
        ],
        vec![-eye.clone(), eye, jd.clone(), jd],
        DVector::zeros(clock_dim),
        sigma,
    )
}

/// Clock-constancy factor over `(c_{i−1}, c_i)`: `e = c_i − c_{i−1}`.
pub fn clock_const_factor(epoch: usize, clock_dim: usize, sigma: f64) -> Result<Factor> {
    check_epoch(epoch)?;
    let eye = DMatrix::<f64>::identity(clock_dim, clock_dim);
    Factor::with_uniform_sigma(
        FactorKind::ClockConst,
        vec![
            VariableKey::clock(epoch - 1, clock_dim),
            VariableKey::clock(epoch, clock_dim),
        ],
        vec![-eye.clone(), eye],
        DVector::zeros(clock_dim),
        sigma,
    )
}

/// Prior `e = θ − value` on a single variable.
pub fn prior_factor(key: VariableKey, value: &DVector<f64>, sigma: f64) -> Result<Factor> {
    Factor::with_uniform_sigma(
        FactorKind::Prior,
        vec![key],
        vec![DMatrix::identity(key.dim, key.dim)],
        value.clone(),
        sigma,
    )
}
