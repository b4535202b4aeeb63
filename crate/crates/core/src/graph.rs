//! Variables, values, factors and the factor graph container.
//!
//! Every factor in this crate is linear in its states: the error of a
//! factor is `e = Σ_j J_j θ_j − constant`, where the Jacobian blocks and the
//! constant are fixed when the factor is built.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::ops::Range;

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::robust::RobustKernel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum VarKind {
    PositionError,
    Clock,
    VelocityError,
    ClockDrift,
    Ambiguity,
}

impl VarKind {
    fn symbol(self) -> &'static str {
        match self {
            VarKind::PositionError => "x",
            VarKind::Clock => "c",
            VarKind::VelocityError => "v",
            VarKind::ClockDrift => "d",
            VarKind::Ambiguity => "B",
        }
    }
}

/// Handle for one state block. `(kind, epoch)` identifies the variable;
/// `dim` is carried along so factors can be validated without a lookup.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VariableKey {
    pub kind: VarKind,
    pub epoch: usize,
    pub dim: usize,
}

impl VariableKey {
    pub fn new(kind: VarKind, epoch: usize, dim: usize) -> Self {
        Self { kind, epoch, dim }
    }

    pub fn position(epoch: usize) -> Self {
        Self::new(VarKind::PositionError, epoch, 3)
    }

    pub fn velocity(epoch: usize) -> Self {
        Self::new(VarKind::VelocityError, epoch, 3)
    }

    pub fn clock(epoch: usize, dim: usize) -> Self {
        Self::new(VarKind::Clock, epoch, dim)
    }

    pub fn drift(epoch: usize) -> Self {
        Self::new(VarKind::ClockDrift, epoch, 1)
    }

    pub fn ambiguity(epoch: usize, dim: usize) -> Self {
        Self::new(VarKind::Ambiguity, epoch, dim)
    }

    fn id(&self) -> (usize, VarKind) {
        (self.epoch, self.kind)
    }
}

// Epoch-major ordering keeps the states of one epoch adjacent in the
// column layout.
impl Ord for VariableKey {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.epoch, self.kind, self.dim).cmp(&(other.epoch, other.kind, other.dim))
    }
}

impl PartialOrd for VariableKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for VariableKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.kind.symbol(), self.epoch)
    }
}

/// Current estimate of every state block.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Values {
    entries: BTreeMap<VariableKey, DVector<f64>>,
}

impl Values {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: VariableKey, value: DVector<f64>) -> Result<()> {
        if value.len() != key.dim {
            return Err(Error::DimensionMismatch {
                context: format!("value for {key}"),
                expected: key.dim,
                found: value.len(),
            });
        }
        self.entries.insert(key, value);
        Ok(())
    }

    pub fn insert_slice(&mut self, key: VariableKey, value: &[f64]) -> Result<()> {
        self.insert(key, DVector::from_column_slice(value))
    }

    pub fn insert_zero(&mut self, key: VariableKey) {
        self.entries.insert(key, DVector::zeros(key.dim));
    }

    pub fn get(&self, key: &VariableKey) -> Option<&DVector<f64>> {
        self.entries.get(key)
    }

    pub fn require(&self, key: &VariableKey) -> Result<&DVector<f64>> {
        self.entries.get(key).ok_or(Error::MissingKey(*key))
    }

    pub fn vector3(&self, key: &VariableKey) -> Result<Vector3<f64>> {
        let v = self.require(key)?;
        if v.len() != 3 {
            return Err(Error::DimensionMismatch {
                context: format!("3-vector {key}"),
                expected: 3,
                found: v.len(),
            });
        }
        Ok(Vector3::new(v[0], v[1], v[2]))
    }

    pub fn contains(&self, key: &VariableKey) -> bool {
        self.entries.contains_key(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &VariableKey> {
        self.entries.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&VariableKey, &DVector<f64>)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Returns `self + delta`, where `delta` is laid out by `ordering`.
    pub fn retract(&self, ordering: &ColumnOrdering, delta: &DVector<f64>) -> Result<Values> {
        let mut out = self.clone();
        for (key, range) in ordering.iter() {
            let slot = out.entries.get_mut(key).ok_or(Error::MissingKey(*key))?;
            *slot += delta.rows(range.start, range.len());
        }
        Ok(out)
    }
}

/// Which error function a factor implements. Used for bookkeeping and
/// diagnostics only; the algebra is carried by the blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorKind {
    Pseudorange,
    PseudorangeSd,
    DopplerVelocity,
    DopplerVelocitySd,
    DopplerTdPos,
    DopplerTdPosSd,
    Tdcp,
    TdcpSd,
    DdCarrier,
    Motion,
    Clock,
    ClockConst,
    Prior,
    Custom,
}

/// A linear residual block `e = Σ_j J_j θ_j − constant` with per-row sigma.
#[derive(Debug, Clone, PartialEq)]
pub struct Factor {
    kind: FactorKind,
    keys: Vec<VariableKey>,
    jacobians: Vec<DMatrix<f64>>,
    constant: DVector<f64>,
    sigma: DVector<f64>,
    kernel: RobustKernel,
}

impl Factor {
    pub fn new(
        kind: FactorKind,
        keys: Vec<VariableKey>,
        jacobians: Vec<DMatrix<f64>>,
        constant: DVector<f64>,
        sigma: DVector<f64>,
    ) -> Result<Self> {
        if keys.is_empty() {
            return Err(Error::InvalidFactor("factor has no keys".into()));
        }
        if keys.len() != jacobians.len() {
            return Err(Error::InvalidFactor(format!(
                "{} keys but {} Jacobian blocks",
                keys.len(),
                jacobians.len()
            )));
        }
        let rows = constant.len();
        if rows == 0 {
            return Err(Error::InvalidFactor("factor has no residual rows".into()));
        }
        if sigma.len() != rows {
            return Err(Error::DimensionMismatch {
                context: "factor sigma".into(),
                expected: rows,
                found: sigma.len(),
            });
        }
        if let Some(s) = sigma.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::InvalidFactor(format!(
                "sigma must be positive, got {s}"
            )));
        }
        let mut seen = BTreeSet::new();
        for (key, jac) in keys.iter().zip(&jacobians) {
            if !seen.insert(key.id()) {
                return Err(Error::InvalidFactor(format!("duplicate key {key}")));
            }
            if jac.nrows() != rows {
                return Err(Error::DimensionMismatch {
                    context: format!("Jacobian rows for {key}"),
                    expected: rows,
                    found: jac.nrows(),
                });
            }
            if jac.ncols() != key.dim {
                return Err(Error::DimensionMismatch {
                    context: format!("Jacobian columns for {key}"),
                    expected: key.dim,
                    found: jac.ncols(),
                });
            }
        }
        Ok(Self {
            kind,
            keys,
            jacobians,
            constant,
            sigma,
            kernel: RobustKernel::None,
        })
    }

    /// Same as [`Factor::new`] with a single sigma shared by all rows.
    pub fn with_uniform_sigma(
        kind: FactorKind,
        keys: Vec<VariableKey>,
        jacobians: Vec<DMatrix<f64>>,
        constant: DVector<f64>,
        sigma: f64,
    ) -> Result<Self> {
        let rows = constant.len();
        Self::new(
            kind,
            keys,
            jacobians,
            constant,
            DVector::from_element(rows, sigma),
        )
    }

    pub fn with_kernel(mut self, kernel: RobustKernel) -> Result<Self> {
        if !kernel.is_valid() {
            return Err(Error::InvalidFactor(format!(
                "invalid robust kernel {kernel:?}"
            )));
        }
        self.kernel = kernel;
        Ok(self)
    }

    pub fn kind(&self) -> FactorKind {
        self.kind
    }

    pub fn keys(&self) -> &[VariableKey] {
        &self.keys
    }

    pub fn jacobians(&self) -> &[DMatrix<f64>] {
        &self.jacobians
    }

    pub fn jacobian(&self, key: &VariableKey) -> Option<&DMatrix<f64>> {
        self.keys
            .iter()
            .position(|k| k == key)
            .map(|i| &self.jacobians[i])
    }

    pub fn constant(&self) -> &DVector<f64> {
        &self.constant
    }

    pub fn sigma(&self) -> &DVector<f64> {
        &self.sigma
    }

    pub fn kernel(&self) -> RobustKernel {
        self.kernel
    }

    pub fn dim(&self) -> usize {
        self.constant.len()
    }

    /// Unweighted, unkernelized error `Σ_j J_j v[key_j] − constant`.
    pub fn evaluate_error(&self, values: &Values) -> Result<DVector<f64>> {
        let mut e = -self.constant.clone();
        for (key, jac) in self.keys.iter().zip(&self.jacobians) {
            let v = values.require(key)?;
            if v.len() != key.dim {
                return Err(Error::DimensionMismatch {
                    context: format!("value for {key}"),
                    expected: key.dim,
                    found: v.len(),
                });
            }
            e.gemv(1.0, jac, v, 1.0);
        }
        Ok(e)
    }

    /// Error divided row-wise by sigma.
    pub fn whitened_error(&self, values: &Values) -> Result<DVector<f64>> {
        Ok(self.evaluate_error(values)?.component_div(&self.sigma))
    }

    /// Kernel cost of this factor at `values`.
    pub fn weighted_cost(&self, values: &Values) -> Result<f64> {
        let w = self.whitened_error(values)?;
        Ok(self.kernel.cost(w.norm_squared()))
    }
}

/// Free-function form of [`Factor::evaluate_error`].
pub fn evaluate_error(factor: &Factor, values: &Values) -> Result<DVector<f64>> {
    factor.evaluate_error(values)
}

/// Linearization point of one epoch: the error states are offsets from it.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Anchor {
    pub position: [f64; 3],
    pub velocity: [f64; 3],
}

impl Anchor {
    pub fn new(position: Vector3<f64>, velocity: Vector3<f64>) -> Self {
        Self {
            position: position.into(),
            velocity: velocity.into(),
        }
    }

    pub fn position(&self) -> Vector3<f64> {
        Vector3::from(self.position)
    }

    pub fn velocity(&self) -> Vector3<f64> {
        Vector3::from(self.velocity)
    }
}

#[derive(Debug, Clone, Default)]
pub struct FactorGraph {
    factors: Vec<Factor>,
    registry: BTreeMap<(usize, VarKind), usize>,
    anchors: BTreeMap<usize, Anchor>,
}

impl FactorGraph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a factor. A variable's dimension is fixed by the first
    /// factor that references it.
    pub fn add(&mut self, factor: Factor) -> Result<()> {
        for key in factor.keys() {
            if let Some(&dim) = self.registry.get(&key.id()) {
                if dim != key.dim {
                    return Err(Error::KeyDimConflict {
                        key: *key,
                        registered: dim,
                    });
                }
            }
        }
        for key in factor.keys() {
            self.registry.insert(key.id(), key.dim);
        }
        self.factors.push(factor);
        Ok(())
    }

    pub fn set_anchor(&mut self, epoch: usize, anchor: Anchor) {
        self.anchors.insert(epoch, anchor);
    }

    pub fn anchor(&self, epoch: usize) -> Option<&Anchor> {
        self.anchors.get(&epoch)
    }

    pub fn anchors(&self) -> &BTreeMap<usize, Anchor> {
        &self.anchors
    }

    pub fn factors(&self) -> &[Factor] {
        &self.factors
    }

    pub fn len(&self) -> usize {
        self.factors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.factors.is_empty()
    }

    pub fn count(&self, kind: FactorKind) -> usize {
        self.factors.iter().filter(|f| f.kind() == kind).count()
    }

    /// All variables referenced by at least one factor, in column order.
    pub fn keys(&self) -> Vec<VariableKey> {
        self.registry
            .iter()
            .map(|(&(epoch, kind), &dim)| VariableKey::new(kind, epoch, dim))
            .collect()
    }

    /// Zero-initialized values for every referenced variable.
    pub fn zero_values(&self) -> Values {
        let mut v = Values::new();
        for key in self.keys() {
            v.insert_zero(key);
        }
        v
    }

    /// `Σ_f ρ_f(‖e_f / σ_f‖²)`.
    pub fn total_weighted_cost(&self, values: &Values) -> Result<f64> {
        if self.factors.is_empty() {
            return Err(Error::EmptyGraph);
        }
        self.factors.iter().map(|f| f.weighted_cost(values)).sum()
    }

    /// Whitened, kernel-weighted linear system at `values`.
    ///
    /// Rows of factor `f` are scaled by `√w_f / σ`, where `w_f` is the IRLS
    /// weight of its kernel at the current whitened error norm. The right
    /// hand side is the negated weighted error, so the Gauss-Newton step
    /// solves `A Δ ≈ b`. Variables present in `values` but not referenced
    /// by any factor still receive (empty) columns.
    pub fn linearize(&self, values: &Values) -> Result<SparseSystem> {
        if self.factors.is_empty() {
            return Err(Error::EmptyGraph);
        }
        let mut all_keys: BTreeSet<VariableKey> = self.keys().into_iter().collect();
        for key in values.keys() {
            if let Some(&dim) = self.registry.get(&key.id()) {
                if dim != key.dim {
                    return Err(Error::KeyDimConflict {
                        key: *key,
                        registered: dim,
                    });
                }
            }
            all_keys.insert(*key);
        }
        let ordering = ColumnOrdering::new(all_keys.into_iter().collect());

        let mut rows = Vec::with_capacity(self.factors.len());
        let mut row_offset = 0;
        for factor in &self.factors {
            let e = factor.evaluate_error(values)?;
            let whitened = e.component_div(factor.sigma());
            let sqrt_w = factor.kernel().weight(whitened.norm()).sqrt();
            let scale = factor.sigma().map(|s| sqrt_w / s);
            let mut cols = Vec::with_capacity(factor.keys().len());
            let mut blocks = Vec::with_capacity(factor.keys().len());
            for (key, jac) in factor.keys().iter().zip(factor.jacobians()) {
                let col = ordering.index_of(key).ok_or(Error::MissingKey(*key))?;
                let mut block = jac.clone();
                for (r, mut row) in block.row_iter_mut().enumerate() {
                    row *= scale[r];
                }
                cols.push(col);
                blocks.push(block);
            }
            let rhs = -e.component_mul(&scale);
            rows.push(RowBlock {
                row_offset,
                cols,
                blocks,
                rhs,
            });
            row_offset += factor.dim();
        }
        Ok(SparseSystem {
            ordering,
            rows,
            n_rows: row_offset,
        })
    }
}

/// Contiguous column range for each variable.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnOrdering {
    keys: Vec<VariableKey>,
    offsets: Vec<usize>,
    index: HashMap<VariableKey, usize>,
    total: usize,
}

impl ColumnOrdering {
    pub fn new(keys: Vec<VariableKey>) -> Self {
        let mut offsets = Vec::with_capacity(keys.len());
        let mut index = HashMap::with_capacity(keys.len());
        let mut total = 0;
        for (i, key) in keys.iter().enumerate() {
            offsets.push(total);
            index.insert(*key, i);
            total += key.dim;
        }
        Self {
            keys,
            offsets,
            index,
            total,
        }
    }

    pub fn keys(&self) -> &[VariableKey] {
        &self.keys
    }

    pub fn num_blocks(&self) -> usize {
        self.keys.len()
    }

    pub fn total_dim(&self) -> usize {
        self.total
    }

    pub fn index_of(&self, key: &VariableKey) -> Option<usize> {
        self.index.get(key).copied()
    }

    pub fn offset(&self, block: usize) -> usize {
        self.offsets[block]
    }

    pub fn range(&self, key: &VariableKey) -> Option<Range<usize>> {
        self.index_of(key)
            .map(|i| self.offsets[i]..self.offsets[i] + key.dim)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&VariableKey, Range<usize>)> {
        self.keys
            .iter()
            .zip(&self.offsets)
            .map(|(k, &o)| (k, o..o + k.dim))
    }

    /// Variable owning scalar column `col`.
    pub fn key_at_column(&self, col: usize) -> Option<VariableKey> {
        if col >= self.total {
            return None;
        }
        let block = match self.offsets.binary_search(&col) {
            Ok(i) => i,
            Err(i) => i - 1,
        };
        Some(self.keys[block])
    }
}

/// Rows contributed by one factor.
#[derive(Debug, Clone)]
pub struct RowBlock {
    pub row_offset: usize,
    /// Block indices into the ordering, parallel to `blocks`.
    pub cols: Vec<usize>,
    pub blocks: Vec<DMatrix<f64>>,
    pub rhs: DVector<f64>,
}

/// Block-sparse whitened Jacobian `A` and right hand side `b`.
#[derive(Debug, Clone)]
pub struct SparseSystem {
    pub ordering: ColumnOrdering,
    pub rows: Vec<RowBlock>,
    pub n_rows: usize,
}

impl SparseSystem {
    pub fn to_dense(&self) -> (DMatrix<f64>, DVector<f64>) {
        let mut a = DMatrix::zeros(self.n_rows, self.ordering.total_dim());
        let mut b = DVector::zeros(self.n_rows);
        for rb in &self.rows {
            let m = rb.rhs.len();
            b.rows_mut(rb.row_offset, m).copy_from(&rb.rhs);
            for (&col, block) in rb.cols.iter().zip(&rb.blocks) {
                let c0 = self.ordering.offset(col);
                a.view_mut((rb.row_offset, c0), (m, block.ncols()))
                    .copy_from(block);
            }
        }
        (a, b)
    }

    /// Accumulates `AᵀA` block-wise and `Aᵀb`.
    pub fn normal_equations(&self) -> NormalEquations {
        let dims: Vec<usize> = self.ordering.keys().iter().map(|k| k.dim).collect();
        let mut h = BlockSymmetric::new(dims);
        let mut g = DVector::zeros(self.ordering.total_dim());
        for rb in &self.rows {
            for (a, (&ci, bi)) in rb.cols.iter().zip(&rb.blocks).enumerate() {
                let off = self.ordering.offset(ci);
                let mut gi = g.rows_mut(off, bi.ncols());
                gi.gemv_tr(1.0, bi, &rb.rhs, 1.0);
                for (&cj, bj) in rb.cols.iter().zip(&rb.blocks).take(a + 1) {
                    h.accumulate(ci, cj, bi, bj);
                }
            }
        }
        NormalEquations { h, g }
    }
}

#[derive(Debug, Clone)]
pub struct NormalEquations {
    pub h: BlockSymmetric,
    pub g: DVector<f64>,
}

/// Symmetric matrix stored as diagonal blocks plus strictly-lower
/// off-diagonal blocks `(i, j)` with `i > j`.
#[derive(Debug, Clone)]
pub struct BlockSymmetric {
    dims: Vec<usize>,
    offsets: Vec<usize>,
    diag: Vec<DMatrix<f64>>,
    off: HashMap<(usize, usize), DMatrix<f64>>,
}

impl BlockSymmetric {
    pub fn new(dims: Vec<usize>) -> Self {
        let mut offsets = Vec::with_capacity(dims.len());
        let mut total = 0;
        for &d in &dims {
            offsets.push(total);
            total += d;
        }
        let diag = dims.iter().map(|&d| DMatrix::zeros(d, d)).collect();
        Self {
            dims,
            offsets,
            diag,
            off: HashMap::new(),
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn num_blocks(&self) -> usize {
        self.dims.len()
    }

    pub fn total_dim(&self) -> usize {
        self.dims.iter().sum()
    }

    pub fn offset(&self, block: usize) -> usize {
        self.offsets[block]
    }

    pub fn diag(&self, block: usize) -> &DMatrix<f64> {
        &self.diag[block]
    }

    pub fn diag_mut(&mut self, block: usize) -> &mut DMatrix<f64> {
        &mut self.diag[block]
    }

    /// Off-diagonal block `(i, j)`, `i > j`.
    pub fn off_diagonal(&self) -> &HashMap<(usize, usize), DMatrix<f64>> {
        &self.off
    }

    /// Adds `Aᵢᵀ Aⱼ` to block `(i, j)`.
    pub fn accumulate(&mut self, i: usize, j: usize, ai: &DMatrix<f64>, aj: &DMatrix<f64>) {
        match i.cmp(&j) {
            Ordering::Equal => self.diag[i].gemm_tr(1.0, ai, aj, 1.0),
            Ordering::Greater => self
                .off
                .entry((i, j))
                .or_insert_with(|| DMatrix::zeros(ai.ncols(), aj.ncols()))
                .gemm_tr(1.0, ai, aj, 1.0),
            Ordering::Less => self
                .off
                .entry((j, i))
                .or_insert_with(|| DMatrix::zeros(aj.ncols(), ai.ncols()))
                .gemm_tr(1.0, aj, ai, 1.0),
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.total_dim();
        let mut m = DMatrix::zeros(n, n);
        for (b, d) in self.diag.iter().enumerate() {
            let o = self.offsets[b];
            m.view_mut((o, o), (d.nrows(), d.ncols())).copy_from(d);
        }
        for (&(i, j), blk) in &self.off {
            let (oi, oj) = (self.offsets[i], self.offsets[j]);
            m.view_mut((oi, oj), (blk.nrows(), blk.ncols()))
                .copy_from(blk);
            m.view_mut((oj, oi), (blk.ncols(), blk.nrows()))
                .copy_from(&blk.transpose());
        }
        m
    }

    /// Adjacency of the block sparsity pattern.
    pub fn adjacency(&self) -> Vec<BTreeSet<usize>> {
        let mut adj = vec![BTreeSet::new(); self.dims.len()];
        for &(i, j) in self.off.keys() {
            adj[i].insert(j);
            adj[j].insert(i);
        }
        adj
    }
}
