//! Graph assembly from epoch records, ambiguity resolution, and the two
//! reference pipelines.
//!
//! A [`GraphRecipe`] lists factor families with their noise models and
//! kernels; [`build_graph`] turns epoch records into a factor graph from it.
//! The robust single-point pipeline and the carrier-phase pipeline are
//! recipes with fixed contents.

use std::collections::BTreeMap;

use log::{debug, warn};
use nalgebra::{DVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::ambiguity::{
    fix_solution, ratio_test, search_integers, AmbiguityProblem, RatioDecision,
    DEFAULT_RATIO_THRESHOLD,
};
use crate::error::{Error, Result};
use crate::factors::{
    self, AveragedDoppler, EpochRecord, GnssSystem, SatObservation, SystemBiasLayout,
};
use crate::graph::{Factor, FactorGraph, Values, VarKind, VariableKey};
use crate::robust::{RobustKernel, DEFAULT_HUBER_K};
use crate::scenario::{apply_masks, elevation_sigma, GroundTruth};
use crate::solver::{marginal_blocks, solve, SolutionReport, SolverConfig};
use crate::stats::{ErrorMetric, ErrorStats};

/// Observation sigma as a function of elevation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum SigmaModel {
    Constant {
        sigma: f64,
    },
    /// `√(a² + b²/sin²(el))`.
    Elevation {
        a: f64,
        b: f64,
    },
}

impl SigmaModel {
    pub fn sigma(&self, elevation: f64) -> Result<f64> {
        match *self {
            SigmaModel::Constant { sigma } => Ok(sigma),
            SigmaModel::Elevation { a, b } => elevation_sigma(elevation, a, b),
        }
    }

    /// Sigma of the difference of two independent observations.
    pub fn sigma_sd(&self, el_k: f64, el_l: f64) -> Result<f64> {
        Ok(self.sigma(el_k)?.hypot(self.sigma(el_l)?))
    }
}

/// One family of factors in a recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum FactorFamily {
    Pseudorange {
        sigma: SigmaModel,
        #[serde(default)]
        kernel: RobustKernel,
    },
    PseudorangeSd {
        sigma: SigmaModel,
        #[serde(default)]
        kernel: RobustKernel,
    },
    DopplerVelocity {
        sigma: f64,
        #[serde(default)]
        kernel: RobustKernel,
    },
    DopplerVelocitySd {
        sigma: f64,
        #[serde(default)]
        kernel: RobustKernel,
    },
    DopplerTdPos {
        sigma: f64,
        #[serde(default)]
        kernel: RobustKernel,
    },
    DopplerTdPosSd {
        sigma: f64,
        #[serde(default)]
        kernel: RobustKernel,
    },
    Tdcp {
        sigma: f64,
        #[serde(default)]
        kernel: RobustKernel,
    },
    TdcpSd {
        sigma: f64,
        #[serde(default)]
        kernel: RobustKernel,
    },
    DdCarrier {
        sigma: f64,
        #[serde(default)]
        kernel: RobustKernel,
    },
    Motion {
        sigma: f64,
    },
    Clock {
        sigma_clock: f64,
        sigma_isb: f64,
    },
    ClockConst {
        sigma: f64,
    },
}

impl FactorFamily {
    fn kernel(&self) -> RobustKernel {
        match self {
            FactorFamily::Pseudorange { kernel, .. }
            | FactorFamily::PseudorangeSd { kernel, .. }
            | FactorFamily::DopplerVelocity { kernel, .. }
            | FactorFamily::DopplerVelocitySd { kernel, .. }
            | FactorFamily::DopplerTdPos { kernel, .. }
            | FactorFamily::DopplerTdPosSd { kernel, .. }
            | FactorFamily::Tdcp { kernel, .. }
            | FactorFamily::TdcpSd { kernel, .. }
            | FactorFamily::DdCarrier { kernel, .. } => *kernel,
            _ => RobustKernel::None,
        }
    }

    fn uses_clock(&self) -> bool {
        matches!(
            self,
            FactorFamily::Pseudorange { .. }
                | FactorFamily::DopplerTdPos { .. }
                | FactorFamily::Tdcp { .. }
                | FactorFamily::Clock { .. }
                | FactorFamily::ClockConst { .. }
        )
    }
}

/// How double-difference ambiguity states are allocated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AmbiguityMode {
    /// One ambiguity vector per epoch, resolved epoch by epoch.
    #[default]
    PerEpoch,
    /// One slot per slip-free arc, resolved once for the whole batch.
    PerArc,
}

/// Observation masks; `None` disables a threshold.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Masks {
    /// dB-Hz.
    pub snr_min: Option<f64>,
    /// Degrees.
    pub el_min_deg: Option<f64>,
}

impl Masks {
    pub fn new(snr_min: f64, el_min_deg: f64) -> Self {
        Self {
            snr_min: Some(snr_min),
            el_min_deg: Some(el_min_deg),
        }
    }

    /// 35 dB-Hz and 15°.
    pub fn urban() -> Self {
        Self::new(35.0, 15.0)
    }

    pub fn is_active(&self) -> bool {
        self.snr_min.is_some() || self.el_min_deg.is_some()
    }

    /// Masked records and the number of removed observations.
    pub fn apply(&self, records: &[EpochRecord]) -> (Vec<EpochRecord>, usize) {
        if !self.is_active() {
            return (records.to_vec(), 0);
        }
        let snr = self.snr_min.unwrap_or(f64::NEG_INFINITY);
        let el = self.el_min_deg.map_or(f64::NEG_INFINITY, f64::to_radians);
        let mut removed = 0;
        let out = records
            .iter()
            .map(|r| {
                let m = apply_masks(r, snr, el);
                removed += m.removed.len();
                m.record
            })
            .collect();
        (out, removed)
    }
}

/// Declarative description of a factor graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GraphRecipe {
    pub factors: Vec<FactorFamily>,
    pub ambiguity: AmbiguityMode,
    pub allow_cross_system: bool,
    pub masks: Masks,
    pub resolve_ambiguities: bool,
    pub ratio_threshold: f64,
    pub metric: ErrorMetric,
    pub solver: SolverConfig,
}

impl Default for GraphRecipe {
    fn default() -> Self {
        Self {
            factors: Vec::new(),
            ambiguity: AmbiguityMode::default(),
            allow_cross_system: false,
            masks: Masks::default(),
            resolve_ambiguities: true,
            ratio_threshold: DEFAULT_RATIO_THRESHOLD,
            metric: ErrorMetric::ThreeD,
            solver: SolverConfig::default(),
        }
    }
}

impl GraphRecipe {
    pub fn from_toml(text: &str) -> Result<Self> {
        let r: Self = toml::from_str(text)?;
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if self.factors.is_empty() {
            return Err(Error::Config("recipe lists no factor families".into()));
        }
        for f in &self.factors {
            if !f.kernel().is_valid() {
                return Err(Error::Config(format!("invalid kernel in {f:?}")));
            }
        }
        if self.ratio_threshold.is_nan() || self.ratio_threshold < 1.0 {
            return Err(Error::Config(format!(
                "ratio threshold must be at least 1, got {}",
                self.ratio_threshold
            )));
        }
        self.solver.validate()
    }

    /// Pseudorange factors with elevation weighting and clock constancy.
    pub fn example1(kernel: RobustKernel, clock_sigma: f64) -> Self {
        Self {
            factors: vec![
                FactorFamily::Pseudorange {
                    sigma: SigmaModel::Elevation { a: 0.3, b: 0.3 },
                    kernel,
                },
                FactorFamily::ClockConst { sigma: clock_sigma },
            ],
            masks: Masks::urban(),
            resolve_ambiguities: false,
            solver: SolverConfig {
                max_iterations: 1000,
                ..SolverConfig::default()
            },
            ..Self::default()
        }
    }

    /// Differenced pseudorange and carrier phase; the second model adds
    /// differenced Doppler and the motion constraint.
    pub fn example2(model: Example2Model) -> Self {
        let mut factors = vec![
            FactorFamily::PseudorangeSd {
                sigma: SigmaModel::Elevation { a: 0.5, b: 0.5 },
                kernel: RobustKernel::None,
            },
            FactorFamily::DdCarrier {
                sigma: 0.003 * std::f64::consts::SQRT_2,
                kernel: RobustKernel::None,
            },
        ];
        if model == Example2Model::Model2 {
            factors.push(FactorFamily::DopplerVelocitySd {
                sigma: 0.05 * std::f64::consts::SQRT_2,
                kernel: RobustKernel::None,
            });
            factors.push(FactorFamily::Motion { sigma: 0.05 });
        }
        Self {
            factors,
            metric: ErrorMetric::Horizontal,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Example2Model {
    Model1,
    Model2,
}

/// One entry of an ambiguity vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotInfo {
    pub sat_id: String,
    pub reference: String,
    pub system: GnssSystem,
    /// First epoch using the slot.
    pub first_epoch: usize,
}

/// An ambiguity variable with the meaning of its slots.
#[derive(Debug, Clone, PartialEq)]
pub struct AmbiguityBlock {
    pub key: VariableKey,
    pub slots: Vec<SlotInfo>,
    /// Epochs with carrier factors on this variable.
    pub epochs: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AmbiguityBook {
    pub mode: AmbiguityMode,
    pub blocks: Vec<AmbiguityBlock>,
}

impl AmbiguityBook {
    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn keys(&self) -> Vec<VariableKey> {
        self.blocks.iter().map(|b| b.key).collect()
    }

    /// Double-difference integers implied by the ground truth, per block.
    pub fn truth_integers(&self, truth: &GroundTruth) -> Result<Vec<(VariableKey, DVector<i64>)>> {
        let by_epoch: BTreeMap<usize, _> = truth.epochs.iter().map(|e| (e.epoch, e)).collect();
        self.blocks
            .iter()
            .map(|b| {
                let ints = b
                    .slots
                    .iter()
                    .map(|s| {
                        let te = by_epoch.get(&s.first_epoch).ok_or_else(|| {
                            Error::InvalidInput(format!("truth lacks epoch {}", s.first_epoch))
                        })?;
                        let n = |id: &str| {
                            te.sat(id).map(|t| t.integer).ok_or_else(|| {
                                Error::InvalidInput(format!(
                                    "truth lacks {id} at epoch {}",
                                    te.epoch
                                ))
                            })
                        };
                        Ok(n(&s.sat_id)? - n(&s.reference)?)
                    })
                    .collect::<Result<Vec<i64>>>()?;
                Ok((b.key, DVector::from_vec(ints)))
            })
            .collect()
    }
}

/// A factor graph together with what is needed to interpret its solution.
#[derive(Debug, Clone)]
pub struct BuiltGraph {
    pub graph: FactorGraph,
    pub initial: Values,
    pub layout: SystemBiasLayout,
    pub ambiguity: AmbiguityBook,
    /// Records after masking.
    pub records: Vec<EpochRecord>,
    pub removed_observations: usize,
}

/// An estimated position at one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochEstimate {
    pub epoch: usize,
    pub time: f64,
    pub position: [f64; 3],
}

impl BuiltGraph {
    /// Anchor plus position error for every epoch that has a position state.
    pub fn positions(&self, values: &Values) -> Result<Vec<EpochEstimate>> {
        let mut out = Vec::new();
        for r in &self.records {
            let key = VariableKey::position(r.epoch);
            if let Some(dx) = values.get(&key) {
                let p = Vector3::from(r.anchor_position) + Vector3::new(dx[0], dx[1], dx[2]);
                out.push(EpochEstimate {
                    epoch: r.epoch,
                    time: r.time,
                    position: [p.x, p.y, p.z],
                });
            }
        }
        Ok(out)
    }
}

fn check_records(records: &[EpochRecord]) -> Result<()> {
    if records.is_empty() {
        return Err(Error::InvalidInput("no epochs".into()));
    }
    for w in records.windows(2) {
        if w[1].epoch <= w[0].epoch {
            return Err(Error::InvalidInput(format!(
                "epochs must be strictly increasing, {} follows {}",
                w[1].epoch, w[0].epoch
            )));
        }
    }
    records.iter().try_for_each(EpochRecord::validate)
}

/// The reference observation for `obs`'s system, if usable.
fn reference_of<'a>(rec: &'a EpochRecord, obs: &SatObservation) -> Option<&'a SatObservation> {
    rec.reference_for(obs.system)
}

struct Builder<'a> {
    graph: FactorGraph,
    recipe: &'a GraphRecipe,
    layout: SystemBiasLayout,
}

impl Builder<'_> {
    fn push(&mut self, factor: Factor, kernel: RobustKernel) -> Result<()> {
        self.graph.add(factor.with_kernel(kernel)?)
    }
}

/// `(epoch, sat_id)` to the ambiguity variable and row holding its slot.
type SlotMap = BTreeMap<(usize, String), (VariableKey, usize)>;

fn assign_ambiguities(
    records: &[EpochRecord],
    mode: AmbiguityMode,
) -> Result<(AmbiguityBook, SlotMap)> {
    let mut slots_of = SlotMap::new();
    let mut book = AmbiguityBook {
        mode,
        blocks: Vec::new(),
    };
    let eligible = |rec: &EpochRecord| -> Result<Vec<(SatObservation, SatObservation)>> {
        let mut v = Vec::new();
        for obs in &rec.sats {
            if !obs.flags.has_ddcp || obs.system == GnssSystem::Glo {
                continue;
            }
            let Some(r) = reference_of(rec, obs) else {
                return Err(Error::NoReference {
                    epoch: rec.epoch,
                    system: obs.system.to_string(),
                });
            };
            if r.sat_id != obs.sat_id {
                v.push((obs.clone(), r.clone()));
            }
        }
        Ok(v)
    };

    match mode {
        AmbiguityMode::PerEpoch => {
            for rec in records {
                let pairs = eligible(rec)?;
                if pairs.is_empty() {
                    continue;
                }
                let key = VariableKey::ambiguity(rec.epoch, pairs.len());
                let slots = pairs
                    .iter()
                    .enumerate()
                    .map(|(k, (o, r))| {
                        slots_of.insert((rec.epoch, o.sat_id.clone()), (key, k));
                        SlotInfo {
                            sat_id: o.sat_id.clone(),
                            reference: r.sat_id.clone(),
                            system: o.system,
                            first_epoch: rec.epoch,
                        }
                    })
                    .collect();
                book.blocks.push(AmbiguityBlock {
                    key,
                    slots,
                    epochs: vec![rec.epoch],
                });
            }
        }
        AmbiguityMode::PerArc => {
            // sat -> (slot, reference, last epoch seen)
            let mut open: BTreeMap<String, (usize, String, usize)> = BTreeMap::new();
            let mut slots: Vec<SlotInfo> = Vec::new();
            let mut uses: Vec<(usize, String, usize)> = Vec::new();
            let mut epochs = Vec::new();
            for rec in records {
                let pairs = eligible(rec)?;
                if !pairs.is_empty() {
                    epochs.push(rec.epoch);
                }
                for (o, r) in pairs {
                    let continues = open.get(&o.sat_id).is_some_and(|(_, rid, last)| {
                        *rid == r.sat_id
                            && *last + 1 == rec.epoch
                            && !o.flags.cycle_slip
                            && !r.flags.cycle_slip
                    });
                    let slot = if continues {
                        open[&o.sat_id].0
                    } else {
                        slots.push(SlotInfo {
                            sat_id: o.sat_id.clone(),
                            reference: r.sat_id.clone(),
                            system: o.system,
                            first_epoch: rec.epoch,
                        });
                        slots.len() - 1
                    };
                    open.insert(o.sat_id.clone(), (slot, r.sat_id.clone(), rec.epoch));
                    uses.push((rec.epoch, o.sat_id.clone(), slot));
                }
            }
            if !slots.is_empty() {
                let key = VariableKey::ambiguity(records[0].epoch, slots.len());
                for (epoch, sat, slot) in uses {
                    slots_of.insert((epoch, sat), (key, slot));
                }
                book.blocks.push(AmbiguityBlock { key, slots, epochs });
            }
        }
    }
    Ok((book, slots_of))
}

/// Builds the factor graph described by `recipe` over `records`.
pub fn build_graph(records: &[EpochRecord], recipe: &GraphRecipe) -> Result<BuiltGraph> {
    recipe.validate()?;
    check_records(records)?;
    let (records, removed) = recipe.masks.apply(records);
    let layout = SystemBiasLayout::from_records(&records);
    let needs_amb = recipe
        .factors
        .iter()
        .any(|f| matches!(f, FactorFamily::DdCarrier { .. }));
    let (book, slots_of) = if needs_amb {
        assign_ambiguities(&records, recipe.ambiguity)?
    } else {
        (AmbiguityBook::default(), BTreeMap::new())
    };

    let mut b = Builder {
        graph: FactorGraph::new(),
        recipe,
        layout: layout.clone(),
    };
    let cross = recipe.allow_cross_system;

    for (k, rec) in records.iter().enumerate() {
        b.graph.set_anchor(rec.epoch, rec.anchor());
        let prev = if k > 0 && records[k - 1].epoch + 1 == rec.epoch {
            Some(&records[k - 1])
        } else {
            if k > 0 {
                warn!("gap before epoch {}; no between-epoch factors", rec.epoch);
            }
            None
        };
        let v0 = Vector3::from(rec.anchor_velocity);

        let psr_count = rec.sats.iter().filter(|s| s.flags.has_psr).count();
        if psr_count < 4
            && recipe
                .factors
                .iter()
                .any(|f| matches!(f, FactorFamily::Pseudorange { .. }))
        {
            warn!("epoch {}: only {psr_count} pseudoranges", rec.epoch);
        }

        for fam in &b.recipe.factors.clone() {
            let kernel = fam.kernel();
            match fam {
                FactorFamily::Pseudorange { sigma, .. } => {
                    for o in rec.sats.iter().filter(|s| s.flags.has_psr) {
                        let f = factors::pseudorange_factor(
                            o,
                            rec.epoch,
                            &b.layout,
                            sigma.sigma(o.elevation)?,
                        )?;
                        b.push(f, kernel)?;
                    }
                }
                FactorFamily::PseudorangeSd { sigma, .. } => {
                    for o in rec.sats.iter().filter(|s| s.flags.has_psr) {
                        let r = sd_reference(rec, o, cross)?;
                        let Some(r) = r.filter(|r| r.flags.has_psr) else {
                            continue;
                        };
                        let s = sigma.sigma_sd(o.elevation, r.elevation)?;
                        b.push(
                            factors::pseudorange_sd_factor(o, r, rec.epoch, s, cross)?,
                            kernel,
                        )?;
                    }
                }
                FactorFamily::DopplerVelocity { sigma, .. } => {
                    for o in rec.sats.iter().filter(|s| s.flags.has_dopp) {
                        b.push(
                            factors::doppler_velocity_factor(o, rec.epoch, &v0, *sigma)?,
                            kernel,
                        )?;
                    }
                }
                FactorFamily::DopplerVelocitySd { sigma, .. } => {
                    for o in rec.sats.iter().filter(|s| s.flags.has_dopp) {
                        let Some(r) = sd_reference(rec, o, cross)?.filter(|r| r.flags.has_dopp)
                        else {
                            continue;
                        };
                        b.push(
                            factors::doppler_velocity_sd_factor(
                                o, r, rec.epoch, &v0, *sigma, cross,
                            )?,
                            kernel,
                        )?;
                    }
                }
                FactorFamily::DopplerTdPos { sigma, .. } => {
                    let Some(p) = prev else { continue };
                    for o in rec.sats.iter().filter(|s| s.flags.has_dopp) {
                        let Some(po) = p.sat(&o.sat_id).filter(|s| s.flags.has_dopp) else {
                            continue;
                        };
                        let avg = AveragedDoppler::from_pair(po, o)?;
                        let f = factors::doppler_tdpos_factor(
                            &avg,
                            rec.epoch,
                            rec.dt_prev,
                            &p.anchor(),
                            &rec.anchor(),
                            &b.layout,
                            *sigma,
                        )?;
                        b.push(f, kernel)?;
                    }
                }
                FactorFamily::DopplerTdPosSd { sigma, .. } => {
                    let Some(p) = prev else { continue };
                    for o in rec.sats.iter().filter(|s| s.flags.has_dopp) {
                        let Some(r) = sd_reference(rec, o, cross)?.filter(|r| r.flags.has_dopp)
                        else {
                            continue;
                        };
                        let (Some(po), Some(pr)) = (p.sat(&o.sat_id), p.sat(&r.sat_id)) else {
                            continue;
                        };
                        if !po.flags.has_dopp || !pr.flags.has_dopp {
                            continue;
                        }
                        let avg = AveragedDoppler::from_pair(po, o)?;
                        let avg_ref = AveragedDoppler::from_pair(pr, r)?;
                        let f = factors::doppler_tdpos_sd_factor(
                            &avg,
                            &avg_ref,
                            rec.epoch,
                            rec.dt_prev,
                            &p.anchor(),
                            &rec.anchor(),
                            *sigma,
                            cross,
                        )?;
                        b.push(f, kernel)?;
                    }
                }
                FactorFamily::Tdcp { sigma, .. } => {
                    let Some(p) = prev else { continue };
                    for o in rec.sats.iter().filter(|s| s.flags.has_tdcp) {
                        let Some(po) = p.sat(&o.sat_id) else { continue };
                        b.push(
                            factors::tdcp_factor(po, o, rec.epoch, &b.layout, *sigma)?,
                            kernel,
                        )?;
                    }
                }
                FactorFamily::TdcpSd { sigma, .. } => {
                    let Some(p) = prev else { continue };
                    for o in rec.sats.iter().filter(|s| s.flags.has_tdcp) {
                        let Some(r) = sd_reference(rec, o, cross)?.filter(|r| r.flags.has_tdcp)
                        else {
                            continue;
                        };
                        let (Some(po), Some(pr)) = (p.sat(&o.sat_id), p.sat(&r.sat_id)) else {
                            continue;
                        };
                        let f = factors::tdcp_sd_factor(po, pr, o, r, rec.epoch, *sigma, cross)?;
                        b.push(f, kernel)?;
                    }
                }
                FactorFamily::DdCarrier { sigma, .. } => {
                    for o in &rec.sats {
                        let Some(&(key, slot)) = slots_of.get(&(rec.epoch, o.sat_id.clone()))
                        else {
                            continue;
                        };
                        let r = reference_of(rec, o).ok_or_else(|| Error::NoReference {
                            epoch: rec.epoch,
                            system: o.system.to_string(),
                        })?;
                        b.push(
                            factors::dd_carrier_factor(o, r, rec.epoch, key, slot, *sigma)?,
                            kernel,
                        )?;
                    }
                }
                FactorFamily::Motion { sigma } => {
                    let Some(p) = prev else { continue };
                    b.push(
                        factors::motion_factor(
                            rec.epoch,
                            rec.dt_prev,
                            &p.anchor(),
                            &rec.anchor(),
                            *sigma,
                        )?,
                        kernel,
                    )?;
                }
                FactorFamily::Clock {
                    sigma_clock,
                    sigma_isb,
                } => {
                    if prev.is_none() {
                        continue;
                    }
                    let f = factors::clock_factor(
                        rec.epoch,
                        rec.dt_prev,
                        b.layout.clock_dim(),
                        *sigma_clock,
                        *sigma_isb,
                    )?;
                    b.push(f, kernel)?;
                }
                FactorFamily::ClockConst { sigma } => {
                    if prev.is_none() {
                        continue;
                    }
                    b.push(
                        factors::clock_const_factor(rec.epoch, b.layout.clock_dim(), *sigma)?,
                        kernel,
                    )?;
                }
            }
        }
    }

    if !recipe.factors.iter().any(FactorFamily::uses_clock) {
        debug!("recipe has no clock states");
    }
    let graph = b.graph;
    if graph.is_empty() {
        return Err(Error::EmptyGraph);
    }
    let initial = graph.zero_values();
    Ok(BuiltGraph {
        graph,
        initial,
        layout,
        ambiguity: book,
        records,
        removed_observations: removed,
    })
}

/// The satellite to difference `obs` against: the reference of its system,
/// or of the first system with a reference when cross-system differences
/// are allowed. `Ok(None)` for the reference itself.
fn sd_reference<'a>(
    rec: &'a EpochRecord,
    obs: &SatObservation,
    cross: bool,
) -> Result<Option<&'a SatObservation>> {
    let r = match reference_of(rec, obs) {
        Some(r) => r,
        None if cross => match rec.reference_sat.values().find_map(|id| rec.sat(id)) {
            Some(r) => r,
            None => {
                return Err(Error::NoReference {
                    epoch: rec.epoch,
                    system: obs.system.to_string(),
                })
            }
        },
        None => {
            return Err(Error::NoReference {
                epoch: rec.epoch,
                system: obs.system.to_string(),
            })
        }
    };
    Ok((r.sat_id != obs.sat_id).then_some(r))
}

/// Pseudorange-plus-clock-constancy graph over position and clock states.
pub fn build_example1_graph(
    records: &[EpochRecord],
    kernel: RobustKernel,
    clock_sigma: f64,
) -> Result<BuiltGraph> {
    build_graph(records, &GraphRecipe::example1(kernel, clock_sigma))
}

pub fn build_example2_graph(records: &[EpochRecord], model: Example2Model) -> Result<BuiltGraph> {
    build_graph(records, &GraphRecipe::example2(model))
}

/// Resolution outcome for one ambiguity variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockResolution {
    pub key: String,
    pub epochs: Vec<usize>,
    pub float: Vec<f64>,
    pub best: Vec<i64>,
    pub q_best: f64,
    pub q_second: f64,
    pub ratio: f64,
    pub fixed: bool,
    /// Trace of the marginal covariance, cycles².
    pub trace: f64,
}

#[derive(Debug, Clone)]
pub struct Resolution {
    pub blocks: Vec<BlockResolution>,
    /// Fraction of carrier epochs whose ambiguities passed the ratio test.
    pub fixed_rate: f64,
    /// Sum of the marginal covariance traces of all ambiguity variables.
    pub float_trace: f64,
    /// Re-solve with fixed ambiguities pinned; `None` if nothing was fixed.
    pub fixed_report: Option<SolutionReport>,
}

/// Runs integer resolution on every ambiguity variable of a solved graph and
/// re-solves with the ones that pass the ratio test.
pub fn resolve_ambiguities(
    built: &BuiltGraph,
    values: &Values,
    ratio_threshold: f64,
    solver: &SolverConfig,
) -> Result<Resolution> {
    let groups: Vec<Vec<VariableKey>> =
        built.ambiguity.blocks.iter().map(|b| vec![b.key]).collect();
    let covs = marginal_blocks(&built.graph, values, &groups)?;
    let mut blocks = Vec::new();
    let mut fixed = Vec::new();
    let (mut fixed_epochs, mut all_epochs) = (0usize, 0usize);
    let mut float_trace = 0.0;
    for (blk, q) in built.ambiguity.blocks.iter().zip(covs) {
        let float = values.require(&blk.key)?.clone();
        let trace = q.trace();
        float_trace += trace;
        let problem = AmbiguityProblem::new(float.clone(), q)?;
        let (best, q_best, q_second, ratio, ok) = if problem.dim() >= 1 {
            let c = search_integers(&problem)?;
            let ok = ratio_test(&c, ratio_threshold) == RatioDecision::Fixed;
            (c.best.clone(), c.q_best, c.q_second, c.ratio(), ok)
        } else {
            unreachable!("ambiguity blocks are never empty")
        };
        all_epochs += blk.epochs.len();
        if ok {
            fixed_epochs += blk.epochs.len();
            fixed.push((blk.key, best.clone()));
        }
        blocks.push(BlockResolution {
            key: blk.key.to_string(),
            epochs: blk.epochs.clone(),
            float: float.iter().copied().collect(),
            best: best.iter().copied().collect(),
            q_best,
            q_second,
            ratio,
            fixed: ok,
            trace,
        });
    }
    let fixed_report = if fixed.is_empty() {
        None
    } else {
        Some(fix_solution(&built.graph, values, &fixed, solver)?)
    };
    Ok(Resolution {
        blocks,
        fixed_rate: if all_epochs == 0 {
            0.0
        } else {
            fixed_epochs as f64 / all_epochs as f64
        },
        float_trace,
        fixed_report,
    })
}

/// Everything produced by one pipeline run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub built: BuiltGraph,
    pub float: SolutionReport,
    pub float_positions: Vec<EpochEstimate>,
    pub resolution: Option<Resolution>,
    /// Positions of the fixed re-solve if any ambiguity was fixed, else the
    /// float positions.
    pub positions: Vec<EpochEstimate>,
    pub stats: Option<ErrorStats>,
    /// Statistics over the epochs whose ambiguities were fixed.
    pub fixed_stats: Option<ErrorStats>,
}

pub fn align_with_truth(
    est: &[EpochEstimate],
    truth: &GroundTruth,
) -> (Vec<[f64; 3]>, Vec<[f64; 3]>) {
    let by_epoch: BTreeMap<usize, [f64; 3]> =
        truth.epochs.iter().map(|e| (e.epoch, e.position)).collect();
    est.iter()
        .filter_map(|e| by_epoch.get(&e.epoch).map(|t| (e.position, *t)))
        .unzip()
}

fn stats_for(
    est: &[EpochEstimate],
    truth: &GroundTruth,
    metric: ErrorMetric,
) -> Result<ErrorStats> {
    let (e, t) = align_with_truth(est, truth);
    crate::stats::compute_error_stats(&e, &t, metric)
}

/// Builds, solves, optionally resolves ambiguities, and scores against
/// `truth` when given.
pub fn run_recipe(
    records: &[EpochRecord],
    recipe: &GraphRecipe,
    truth: Option<&GroundTruth>,
) -> Result<RunOutput> {
    let built = build_graph(records, recipe)?;
    let float = solve(&built.graph, &built.initial, &recipe.solver)?;
    if !float.converged {
        warn!(
            "solver stopped after {} iterations without converging",
            float.iterations
        );
    }
    let float_positions = built.positions(&float.values)?;
    let resolution = if recipe.resolve_ambiguities && !built.ambiguity.is_empty() {
        Some(resolve_ambiguities(
            &built,
            &float.values,
            recipe.ratio_threshold,
            &recipe.solver,
        )?)
    } else {
        None
    };
    let positions = match resolution.as_ref().and_then(|r| r.fixed_report.as_ref()) {
        Some(rep) => built.positions(&rep.values)?,
        None => float_positions.clone(),
    };
    let (stats, fixed_stats) = match truth {
        Some(t) => {
            let stats = stats_for(&positions, t, recipe.metric)?;
            let fixed_epochs: std::collections::BTreeSet<usize> = resolution
                .iter()
                .flat_map(|r| {
                    r.blocks
                        .iter()
                        .filter(|b| b.fixed)
                        .flat_map(|b| b.epochs.clone())
                })
                .collect();
            let fixed_pos: Vec<EpochEstimate> = positions
                .iter()
                .filter(|p| fixed_epochs.contains(&p.epoch))
                .copied()
                .collect();
            let fixed_stats = if fixed_pos.is_empty() {
                None
            } else {
                Some(stats_for(&fixed_pos, t, recipe.metric)?)
            };
            (Some(stats), fixed_stats)
        }
        None => (None, None),
    };
    Ok(RunOutput {
        built,
        float,
        float_positions,
        resolution,
        positions,
        stats,
        fixed_stats,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Example1Config {
    pub kernel: RobustKernel,
    pub clock_sigma: f64,
    pub masks: Masks,
}

impl Default for Example1Config {
    fn default() -> Self {
        Self {
            kernel: RobustKernel::huber(DEFAULT_HUBER_K),
            clock_sigma: 0.1,
            masks: Masks::urban(),
        }
    }
}

pub fn run_example1(
    records: &[EpochRecord],
    truth: Option<&GroundTruth>,
    cfg: &Example1Config,
) -> Result<RunOutput> {
    let mut recipe = GraphRecipe::example1(cfg.kernel, cfg.clock_sigma);
    recipe.masks = cfg.masks;
    run_recipe(records, &recipe, truth)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Example2Config {
    pub model: Example2Model,
    pub ratio_threshold: f64,
    pub ambiguity: AmbiguityMode,
}

impl Default for Example2Config {
    fn default() -> Self {
        Self {
            model: Example2Model::Model2,
            ratio_threshold: DEFAULT_RATIO_THRESHOLD,
            ambiguity: AmbiguityMode::PerEpoch,
        }
    }
}

pub fn example2_recipe(cfg: &Example2Config) -> GraphRecipe {
    let mut recipe = GraphRecipe::example2(cfg.model);
    recipe.ratio_threshold = cfg.ratio_threshold;
    recipe.ambiguity = cfg.ambiguity;
    recipe
}

pub fn run_example2(
    records: &[EpochRecord],
    truth: Option<&GroundTruth>,
    cfg: &Example2Config,
) -> Result<RunOutput> {
    run_recipe(records, &example2_recipe(cfg), truth)
}

/// Counts the variables of each kind in a graph.
pub fn variable_counts(graph: &FactorGraph) -> BTreeMap<VarKind, usize> {
    let mut m = BTreeMap::new();
    for k in graph.keys() {
        *m.entry(k.kind).or_insert(0) += 1;
    }
    m
}
