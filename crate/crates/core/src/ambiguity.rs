//! Integer least-squares ambiguity resolution.
//!
//! Decorrelation follows the usual LDLᵀ reduction (integer Gauss transforms
//! plus symmetric permutations), followed by a shrinking-ellipsoid search in
//! the decorrelated space. The integer transform is tracked together with its
//! inverse as exact `i64` matrices so that candidates map back to the
//! original ambiguities without rounding.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::graph::{FactorGraph, Values, VariableKey};
use crate::linalg::DenseCholesky;
use crate::solver::{solve, SolutionReport, SolverConfig};

pub const DEFAULT_RATIO_THRESHOLD: f64 = 2.0;
/// σ of the hard prior used to pin fixed ambiguities, in cycles.
pub const FIX_SIGMA: f64 = 1e-6;

const MAX_SEARCH_NODES: usize = 50_000_000;
const TIE_TOLERANCE: f64 = 1e-9;

/// Float ambiguities (cycles) and their covariance (cycles²).
#[derive(Debug, Clone, PartialEq)]
pub struct AmbiguityProblem {
    pub float_amb: DVector<f64>,
    pub q: DMatrix<f64>,
}

impl AmbiguityProblem {
    pub fn new(float_amb: DVector<f64>, q: DMatrix<f64>) -> Result<Self> {
        let p = Self { float_amb, q };
        p.validate()?;
        Ok(p)
    }

    pub fn dim(&self) -> usize {
        self.float_amb.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.float_amb.len();
        if n == 0 {
            return Err(Error::InvalidInput("empty ambiguity vector".into()));
        }
        if self.q.nrows() != n || self.q.ncols() != n {
            return Err(Error::DimensionMismatch {
                context: "ambiguity covariance".into(),
                expected: n,
                found: self.q.nrows(),
            });
        }
        if self
            .float_amb
            .iter()
            .chain(self.q.iter())
            .any(|x| !x.is_finite())
        {
            return Err(Error::InvalidInput("non-finite ambiguity problem".into()));
        }
        let scale = self.q.amax().max(1.0);
        for i in 0..n {
            for j in 0..i {
                if (self.q[(i, j)] - self.q[(j, i)]).abs() > 1e-10 * scale {
                    return Err(Error::NotPositiveDefinite(format!(
                        "covariance not symmetric at ({i},{j})"
                    )));
                }
            }
        }
        ld_factor(&self.q).map(|_| ())
    }

    /// `(a − â)ᵀ Q⁻¹ (a − â)`.
    pub fn mahalanobis(&self, a: &DVector<i64>) -> Result<f64> {
        let chol = DenseCholesky::new(self.q.clone())
            .map_err(|_| Error::NotPositiveDefinite("ambiguity covariance".into()))?;
        Ok(quad_form(&chol, &self.float_amb, a))
    }
}

fn quad_form(chol: &DenseCholesky, float_amb: &DVector<f64>, a: &DVector<i64>) -> f64 {
    let r = a.map(|x| x as f64) - float_amb;
    r.dot(&chol.solve(&r))
}

/// `Q = Lᵀ·diag(D)·L` with unit lower-triangular `L`.
fn ld_factor(q: &DMatrix<f64>) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let n = q.nrows();
    let mut a = q.clone();
    let mut l = DMatrix::zeros(n, n);
    let mut d = DVector::zeros(n);
    for i in (0..n).rev() {
        d[i] = a[(i, i)];
        if d[i].is_nan() || d[i] <= 0.0 {
            return Err(Error::NotPositiveDefinite(format!(
                "ambiguity covariance pivot {i} = {:e}",
                d[i]
            )));
        }
        let s = d[i].sqrt();
        for j in 0..=i {
            l[(i, j)] = a[(i, j)] / s;
        }
        for j in 0..i {
            for k in 0..=j {
                a[(j, k)] -= l[(i, k)] * l[(i, j)];
            }
        }
        let lii = l[(i, i)];
        for j in 0..=i {
            l[(i, j)] /= lii;
        }
    }
    Ok((l, d))
}

/// Result of decorrelating an [`AmbiguityProblem`].
#[derive(Debug, Clone)]
pub struct Decorrelation {
    /// Unimodular integer transform: `z = Zᵀ a`.
    pub z: DMatrix<i64>,
    pub z_inv: DMatrix<i64>,
    /// The transformed problem: `Zᵀ â`, `Zᵀ Q Z`.
    pub problem: AmbiguityProblem,
    l: DMatrix<f64>,
    d: DVector<f64>,
}

impl Decorrelation {
    /// Maps an integer vector in the decorrelated space back to the original
    /// ambiguities, `a = Z⁻ᵀ z`.
    pub fn back_transform(&self, z: &DVector<i64>) -> DVector<i64> {
        self.z_inv.transpose() * z
    }

    pub fn back_transform_float(&self, z: &DVector<f64>) -> DVector<f64> {
        self.z_inv.map(|x| x as f64).transpose() * z
    }
}

pub fn decorrelate(p: &AmbiguityProblem) -> Result<Decorrelation> {
    p.validate()?;
    let n = p.dim();
    let (mut l, mut d) = ld_factor(&p.q)?;
    let mut z = DMatrix::<i64>::identity(n, n);
    let mut zi = DMatrix::<i64>::identity(n, n);

    if n > 1 {
        let mut j = n as isize - 2;
        let mut k = n as isize - 2;
        while j >= 0 {
            let ju = j as usize;
            if j <= k {
                for i in ju + 1..n {
                    gauss(&mut l, &mut z, &mut zi, i, ju);
                }
            }
            let del = d[ju] + l[(ju + 1, ju)] * l[(ju + 1, ju)] * d[ju + 1];
            if del + 1e-6 < d[ju + 1] {
                permute(&mut l, &mut d, &mut z, &mut zi, ju, del);
                k = j;
                j = n as isize - 2;
            } else {
                j -= 1;
            }
        }
    }

    let zf = z.map(|x| x as f64);
    let float_amb = zf.transpose() * &p.float_amb;
    let mut q = zf.transpose() * &p.q * &zf;
    q = (&q + q.transpose()) * 0.5;
    Ok(Decorrelation {
        z,
        z_inv: zi,
        problem: AmbiguityProblem { float_amb, q },
        l,
        d,
    })
}

fn gauss(l: &mut DMatrix<f64>, z: &mut DMatrix<i64>, zi: &mut DMatrix<i64>, i: usize, j: usize) {
    let n = l.nrows();
    let mu = l[(i, j)].round();
    if mu == 0.0 {
        return;
    }
    for k in i..n {
        l[(k, j)] -= mu * l[(k, i)];
    }
    let m = mu as i64;
    for k in 0..n {
        z[(k, j)] -= m * z[(k, i)];
    }
    // Z ← Z·(I − μ e_i e_jᵀ)  ⇒  Z⁻¹ ← (I + μ e_i e_jᵀ)·Z⁻¹
    for k in 0..n {
        zi[(i, k)] += m * zi[(j, k)];
    }
}

fn permute(
    l: &mut DMatrix<f64>,
    d: &mut DVector<f64>,
    z: &mut DMatrix<i64>,
    zi: &mut DMatrix<i64>,
    j: usize,
    del: f64,
) {
    let n = l.nrows();
    let eta = d[j] / del;
    let lam = d[j + 1] * l[(j + 1, j)] / del;
    d[j] = eta * d[j + 1];
    d[j + 1] = del;
    for k in 0..j {
        let a0 = l[(j, k)];
        let a1 = l[(j + 1, k)];
        l[(j, k)] = -l[(j + 1, j)] * a0 + a1;
        l[(j + 1, k)] = eta * a0 + lam * a1;
    }
    l[(j + 1, j)] = lam;
    for k in j + 2..n {
        l.swap((k, j), (k, j + 1));
    }
    z.swap_columns(j, j + 1);
    zi.swap_rows(j, j + 1);
}

/// Best and second-best integer vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct IntegerCandidates {
    pub best: DVector<i64>,
    pub second: DVector<i64>,
    pub q_best: f64,
    pub q_second: f64,
}

impl IntegerCandidates {
    pub fn ratio(&self) -> f64 {
        if self.q_best > 0.0 {
            self.q_second / self.q_best
        } else if self.q_second > 0.0 {
            f64::INFINITY
        } else {
            1.0
        }
    }
}

/// The `count` integer vectors with the smallest Mahalanobis distance,
/// ordered by distance and then lexicographically among ties.
pub fn search_candidates(p: &AmbiguityProblem, count: usize) -> Result<Vec<(DVector<i64>, f64)>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    let dec = decorrelate(p)?;
    let found = ellipsoid_search(&dec.l, &dec.d, &dec.problem.float_amb, count)?;

    let chol = DenseCholesky::new(p.q.clone())
        .map_err(|_| Error::NotPositiveDefinite("ambiguity covariance".into()))?;
    let mut cands: Vec<(DVector<i64>, f64)> = found
        .into_iter()
        .map(|zc| {
            let a = dec.back_transform(&zc);
            let q = quad_form(&chol, &p.float_amb, &a);
            (a, q)
        })
        .collect();
    cands.sort_by(|a, b| a.1.total_cmp(&b.1));

    let mut ordered = Vec::with_capacity(cands.len());
    let mut start = 0;
    while start < cands.len() {
        let q0 = cands[start].1;
        let mut end = start + 1;
        while end < cands.len() && cands[end].1 - q0 <= TIE_TOLERANCE * q0.max(1.0) {
            end += 1;
        }
        let mut group = cands[start..end].to_vec();
        group.sort_by(|a, b| a.0.as_slice().cmp(b.0.as_slice()));
        ordered.extend(group);
        start = end;
    }
    ordered.truncate(count);
    Ok(ordered)
}

pub fn search_integers(p: &AmbiguityProblem) -> Result<IntegerCandidates> {
    let mut c = search_candidates(p, 2)?;
    if c.len() < 2 {
        return Err(Error::InvalidInput(
            "integer search found fewer than two candidates".into(),
        ));
    }
    let (second, q_second) = c.pop().unwrap();
    let (best, q_best) = c.pop().unwrap();
    Ok(IntegerCandidates {
        best,
        second,
        q_best,
        q_second,
    })
}

/// Depth-first enumeration of the ellipsoid `Σ (z_k − ẑ_{k|k+1})²/D_k ≤ χ²`,
/// shrinking χ² to the `count`-th best distance found. Candidates within a
/// relative tie tolerance of that bound are kept so ties are not pruned.
fn ellipsoid_search(
    l: &DMatrix<f64>,
    d: &DVector<f64>,
    zs: &DVector<f64>,
    count: usize,
) -> Result<Vec<DVector<i64>>> {
    let n = zs.len();
    let sgn = |x: f64| if x <= 0.0 { -1.0 } else { 1.0 };
    let mut s = DMatrix::<f64>::zeros(n + 1, n);
    let mut dist = vec![0.0; n];
    let mut zb = vec![0.0; n];
    let mut z = vec![0.0; n];
    let mut step = vec![0.0; n];
    let mut found: Vec<(Vec<f64>, f64)> = Vec::new();
    let mut maxdist = f64::INFINITY;

    let mut k = n - 1;
    zb[k] = zs[k];
    z[k] = zb[k].round();
    let mut y = zb[k] - z[k];
    step[k] = sgn(y);

    for _ in 0..MAX_SEARCH_NODES {
        let newdist = dist[k] + y * y / d[k];
        if newdist <= maxdist {
            if k != 0 {
                k -= 1;
                dist[k] = newdist;
                for i in 0..=k {
                    s[(k, i)] = s[(k + 1, i)] + (z[k + 1] - zb[k + 1]) * l[(k + 1, i)];
                }
                zb[k] = zs[k] + s[(k, k)];
                z[k] = zb[k].round();
                y = zb[k] - z[k];
                step[k] = sgn(y);
            } else {
                found.push((z.clone(), newdist));
                if found.len() >= count {
                    found.sort_by(|a, b| a.1.total_cmp(&b.1));
                    let bound = found[count - 1].1;
                    maxdist = bound + TIE_TOLERANCE * bound.max(1.0);
                    found.retain(|c| c.1 <= maxdist);
                }
                z[0] += step[0];
                y = zb[0] - z[0];
                step[0] = -step[0] - sgn(step[0]);
            }
        } else {
            if k == n - 1 {
                return Ok(found
                    .into_iter()
                    .map(|(z, _)| DVector::from_iterator(n, z.into_iter().map(|x| x as i64)))
                    .collect());
            }
            k += 1;
            z[k] += step[k];
            y = zb[k] - z[k];
            step[k] = -step[k] - sgn(step[k]);
        }
    }
    Err(Error::InvalidInput(
        "integer search exceeded its node budget".into(),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RatioDecision {
    Fixed,
    Float,
}

pub fn ratio_test(c: &IntegerCandidates, threshold: f64) -> RatioDecision {
    let fixed = if c.q_best > 0.0 {
        c.q_second / c.q_best >= threshold
    } else {
        c.q_second > 0.0
    };
    if fixed {
        RatioDecision::Fixed
    } else {
        RatioDecision::Float
    }
}

/// Re-solves `graph` with each listed ambiguity variable pinned to integers
/// by a tight prior.
pub fn fix_solution(
    graph: &FactorGraph,
    values: &Values,
    fixed: &[(VariableKey, DVector<i64>)],
    cfg: &SolverConfig,
) -> Result<SolutionReport> {
    let mut g = graph.clone();
    let mut init = values.clone();
    for (key, ints) in fixed {
        if ints.len() != key.dim {
            return Err(Error::DimensionMismatch {
                context: format!("fixed integers for {key}"),
                expected: key.dim,
                found: ints.len(),
            });
        }
        let target = ints.map(|x| x as f64);
        g.add(crate::factors::prior_factor(*key, &target, FIX_SIGMA)?)?;
        init.insert(*key, target)?;
    }
    solve(&g, &init, cfg)
}
