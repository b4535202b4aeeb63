//! Cholesky factorization of the normal equations.
//!
//! Small systems are factorized densely. Larger ones use a block
//! right-looking Cholesky over the variable blocks, eliminated in
//! approximate minimum-degree order so that chain-structured graphs stay
//! linear in the number of epochs.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};

use crate::graph::BlockSymmetric;

/// Relative pivot threshold below which a column is treated as dependent.
pub const PIVOT_TOLERANCE: f64 = 1e-12;

/// Scalar column (in the original, unpermuted layout) at which the
/// factorization broke down.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SingularColumn(pub usize);

/// In-place lower Cholesky `M = L Lᵀ`. The strict upper triangle is zeroed.
/// `reference[k]` is the scale a pivot is compared against.
fn cholesky_in_place(m: &mut DMatrix<f64>, reference: &[f64]) -> Result<(), usize> {
    let n = m.nrows();
    for j in 0..n {
        let mut d = m[(j, j)];
        for k in 0..j {
            d -= m[(j, k)] * m[(j, k)];
        }
        let scale = reference[j].abs();
        if !(d.is_finite() && d > PIVOT_TOLERANCE * scale && d > f64::MIN_POSITIVE) {
            return Err(j);
        }
        let ljj = d.sqrt();
        m[(j, j)] = ljj;
        for i in (j + 1)..n {
            let mut s = m[(i, j)];
            for k in 0..j {
                s -= m[(i, k)] * m[(j, k)];
            }
            m[(i, j)] = s / ljj;
        }
    }
    for j in 1..n {
        for i in 0..j {
            m[(i, j)] = 0.0;
        }
    }
    Ok(())
}

/// Dense Cholesky factor.
#[derive(Debug, Clone)]
pub struct DenseCholesky {
    l: DMatrix<f64>,
}

impl DenseCholesky {
    pub fn new(mut m: DMatrix<f64>) -> Result<Self, SingularColumn> {
        let reference: Vec<f64> = m.diagonal().iter().copied().collect();
        cholesky_in_place(&mut m, &reference).map_err(SingularColumn)?;
        Ok(Self { l: m })
    }

    pub fn l(&self) -> &DMatrix<f64> {
        &self.l
    }

    pub fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        let y = self
            .l
            .solve_lower_triangular(rhs)
            .expect("Cholesky factor has a positive diagonal");
        self.l
            .tr_solve_lower_triangular(&y)
            .expect("Cholesky factor has a positive diagonal")
    }
}

/// Greedy minimum-degree elimination order on a block graph. Degree is
/// measured in scalar columns; ties go to the lowest block index.
pub fn min_degree_order(adjacency: &[BTreeSet<usize>], dims: &[usize]) -> Vec<usize> {
    let n = adjacency.len();
    let mut adj: Vec<BTreeSet<usize>> = adjacency.to_vec();
    let mut eliminated = vec![false; n];
    let mut order = Vec::with_capacity(n);
    for _ in 0..n {
        let mut best = usize::MAX;
        let mut best_deg = usize::MAX;
        for v in 0..n {
            if eliminated[v] {
                continue;
            }
            let deg: usize = adj[v].iter().map(|&u| dims[u]).sum();
            if deg < best_deg {
                best_deg = deg;
                best = v;
            }
        }
        eliminated[best] = true;
        order.push(best);
        let nbrs: Vec<usize> = std::mem::take(&mut adj[best]).into_iter().collect();
        for &u in &nbrs {
            adj[u].remove(&best);
            for &w in &nbrs {
                if w != u {
                    adj[u].insert(w);
                }
            }
        }
    }
    order
}

/// Block Cholesky factor `P H Pᵀ = L Lᵀ` with `P` a block permutation.
#[derive(Debug, Clone)]
pub struct BlockCholesky {
    /// Block eliminated at each position.
    order: Vec<usize>,
    dims: Vec<usize>,
    offsets: Vec<usize>,
    diag: Vec<DMatrix<f64>>,
    /// For each position, the sub-diagonal blocks `(row position, L_rp)`.
    columns: Vec<Vec<(usize, DMatrix<f64>)>>,
}

impl BlockCholesky {
    pub fn new(h: &BlockSymmetric) -> Result<Self, SingularColumn> {
        let order = min_degree_order(&h.adjacency(), h.dims());
        Self::with_order(h, order)
    }

    pub fn with_order(h: &BlockSymmetric, order: Vec<usize>) -> Result<Self, SingularColumn> {
        let n = h.num_blocks();
        assert_eq!(order.len(), n, "ordering must cover every block");
        let mut pos = vec![0; n];
        for (p, &b) in order.iter().enumerate() {
            pos[b] = p;
        }
        let dims: Vec<usize> = h.dims().to_vec();
        let offsets: Vec<usize> = (0..n).map(|b| h.offset(b)).collect();

        let mut diag: Vec<DMatrix<f64>> = order.iter().map(|&b| h.diag(b).clone()).collect();
        let reference: Vec<Vec<f64>> = diag
            .iter()
            .map(|d| d.diagonal().iter().copied().collect())
            .collect();
        let mut work: Vec<BTreeMap<usize, DMatrix<f64>>> = vec![BTreeMap::new(); n];
        for (&(i, j), blk) in h.off_diagonal() {
            let (pi, pj) = (pos[i], pos[j]);
            if pi > pj {
                work[pj].insert(pi, blk.clone());
            } else {
                work[pi].insert(pj, blk.transpose());
            }
        }

        let mut columns = Vec::with_capacity(n);
        for p in 0..n {
            let mut lpp = std::mem::replace(&mut diag[p], DMatrix::zeros(0, 0));
            cholesky_in_place(&mut lpp, &reference[p])
                .map_err(|local| SingularColumn(offsets[order[p]] + local))?;
            let below = std::mem::take(&mut work[p]);
            let lcol: Vec<(usize, DMatrix<f64>)> = below
                .into_iter()
                .map(|(r, a)| {
                    // L_rp = A_rp L_pp⁻ᵀ
                    let x = lpp
                        .solve_lower_triangular(&a.transpose())
                        .expect("positive pivots");
                    (r, x.transpose())
                })
                .collect();
            for (ai, (r, lr)) in lcol.iter().enumerate() {
                diag[*r].gemm(-1.0, lr, &lr.transpose(), 1.0);
                for (s, ls) in &lcol[..ai] {
                    let entry = work[*s]
                        .entry(*r)
                        .or_insert_with(|| DMatrix::zeros(lr.nrows(), ls.nrows()));
                    entry.gemm(-1.0, lr, &ls.transpose(), 1.0);
                }
            }
            diag[p] = lpp;
            columns.push(lcol);
        }
        Ok(Self {
            order,
            dims,
            offsets,
            diag,
            columns,
        })
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        let n = self.order.len();
        let mut y: Vec<DVector<f64>> = self
            .order
            .iter()
            .map(|&b| rhs.rows(self.offsets[b], self.dims[b]).into_owned())
            .collect();
        for p in 0..n {
            let yp = self.diag[p]
                .solve_lower_triangular(&y[p])
                .expect("positive pivots");
            for (r, lrp) in &self.columns[p] {
                y[*r].gemv(-1.0, lrp, &yp, 1.0);
            }
            y[p] = yp;
        }
        for p in (0..n).rev() {
            let mut xp = y[p].clone();
            for (r, lrp) in &self.columns[p] {
                xp.gemv_tr(-1.0, lrp, &y[*r], 1.0);
            }
            y[p] = self.diag[p]
                .tr_solve_lower_triangular(&xp)
                .expect("positive pivots");
        }
        let mut out = DVector::zeros(rhs.len());
        for (p, &b) in self.order.iter().enumerate() {
            out.rows_mut(self.offsets[b], self.dims[b]).copy_from(&y[p]);
        }
        out
    }
}

#[derive(Debug, Clone)]
pub enum Factorization {
    Dense(DenseCholesky),
    Block(BlockCholesky),
}

impl Factorization {
    /// Factorizes `H + damping · diag(H)`. Systems with at most
    /// `dense_limit` columns are handled densely.
    pub fn new(
        h: &BlockSymmetric,
        damping: f64,
        dense_limit: usize,
    ) -> Result<Self, SingularColumn> {
        let mut h = h.clone();
        if damping > 0.0 {
            for b in 0..h.num_blocks() {
                let d = h.diag_mut(b);
                for k in 0..d.nrows() {
                    d[(k, k)] += damping * d[(k, k)].max(1e-9);
                }
            }
        }
        if h.total_dim() <= dense_limit {
            Ok(Factorization::Dense(DenseCholesky::new(h.to_dense())?))
        } else {
            Ok(Factorization::Block(BlockCholesky::new(&h)?))
        }
    }

    pub fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        match self {
            Factorization::Dense(f) => f.solve(rhs),
            Factorization::Block(f) => f.solve(rhs),
        }
    }
}
