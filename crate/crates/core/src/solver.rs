//! Batch Levenberg-Marquardt with IRLS robust weighting.
//!
//! Each iteration relinearizes the (already linear) factors at the current
//! values, which only refreshes the kernel weights. The undamped
//! Gauss-Newton step is tried first; damping `λ·diag(H)` is applied only
//! when that step fails to reduce the cost.

use std::collections::BTreeSet;

use log::debug;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{ColumnOrdering, FactorGraph, Values, VariableKey};
use crate::linalg::{Factorization, SingularColumn};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub max_iterations: usize,
    pub lambda_init: f64,
    pub lambda_factor: f64,
    /// Relative cost change below which the solve is converged.
    pub cost_tolerance: f64,
    /// Largest absolute state update below which the solve is converged.
    pub step_tolerance: f64,
    /// Systems with at most this many columns use a dense Cholesky.
    pub dense_column_limit: usize,
    pub lambda_max: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            lambda_init: 1e-4,
            lambda_factor: 10.0,
            cost_tolerance: 1e-9,
            step_tolerance: 1e-10,
            dense_column_limit: 300,
            lambda_max: 1e12,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.lambda_init,
            self.lambda_factor,
            self.cost_tolerance,
            self.step_tolerance,
            self.lambda_max,
        ];
        if self.max_iterations == 0 || positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Config(format!(
                "solver parameters must be positive: {self:?}"
            )));
        }
        if self.lambda_factor <= 1.0 {
            return Err(Error::Config("lambda_factor must exceed 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SolutionReport {
    pub values: Values,
    pub iterations: usize,
    pub final_cost: f64,
    pub converged: bool,
    /// Initial cost followed by the cost after every accepted step.
    pub per_iteration_costs: Vec<f64>,
}

fn singular_error(ordering: &ColumnOrdering, col: SingularColumn, unused: &[VariableKey]) -> Error {
    let mut keys: BTreeSet<VariableKey> = unused.iter().copied().collect();
    if let Some(k) = ordering.key_at_column(col.0) {
        keys.insert(k);
    }
    Error::Singular {
        keys: keys.into_iter().collect(),
    }
}

/// Variables with an all-zero column in the information matrix.
fn untouched_keys(graph: &FactorGraph, ordering: &ColumnOrdering) -> Vec<VariableKey> {
    let touched: BTreeSet<VariableKey> = graph
        .factors()
        .iter()
        .flat_map(|f| {
            f.keys()
                .iter()
                .zip(f.jacobians())
                .filter(|(_, j)| j.iter().any(|x| *x != 0.0))
                .map(|(k, _)| *k)
        })
        .collect();
    ordering
        .keys()
        .iter()
        .filter(|k| !touched.contains(k))
        .copied()
        .collect()
}

fn factorize(
    graph: &FactorGraph,
    ordering: &ColumnOrdering,
    h: &crate::graph::BlockSymmetric,
    damping: f64,
    cfg: &SolverConfig,
) -> Result<Factorization> {
    Factorization::new(h, damping, cfg.dense_column_limit)
        .map_err(|col| singular_error(ordering, col, &untouched_keys(graph, ordering)))
}

fn check_complete(graph: &FactorGraph, values: &Values) -> Result<()> {
    for key in graph.keys() {
        if !values.contains(&key) {
            return Err(Error::MissingKey(key));
        }
    }
    Ok(())
}

/// Minimizes the total weighted cost of `graph` starting from `init`.
pub fn solve(graph: &FactorGraph, init: &Values, cfg: &SolverConfig) -> Result<SolutionReport> {
    cfg.validate()?;
    if graph.is_empty() {
        return Err(Error::EmptyGraph);
    }
    check_complete(graph, init)?;

    let mut values = init.clone();
    let mut cost = graph.total_weighted_cost(&values)?;
    let mut costs = vec![cost];
    let mut lambda = cfg.lambda_init;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < cfg.max_iterations {
        iterations += 1;
        let system = graph.linearize(&values)?;
        let ordering = &system.ordering;
        let ne = system.normal_equations();

        let gn = factorize(graph, ordering, &ne.h, 0.0, cfg)?;
        let step = gn.solve(&ne.g);
        let candidate = values.retract(ordering, &step)?;
        let new_cost = graph.total_weighted_cost(&candidate)?;
        let max_step = step.amax();

        let (step, candidate, new_cost) = if new_cost < cost {
            (step, candidate, new_cost)
        } else if new_cost - cost <= cfg.cost_tolerance * cost.max(f64::MIN_POSITIVE)
            || max_step < cfg.step_tolerance
        {
            converged = true;
            break;
        } else {
            let mut accepted = None;
            while lambda <= cfg.lambda_max {
                let damped = factorize(graph, ordering, &ne.h, lambda, cfg)?;
                let step = damped.solve(&ne.g);
                let candidate = values.retract(ordering, &step)?;
                let new_cost = graph.total_weighted_cost(&candidate)?;
                if new_cost < cost {
                    lambda = (lambda / cfg.lambda_factor).max(1e-15);
                    accepted = Some((step, candidate, new_cost));
                    break;
                }
                lambda *= cfg.lambda_factor;
            }
            match accepted {
                Some(a) => a,
                None => {
                    debug!("no cost-reducing step at iteration {iterations}, cost {cost}");
                    break;
                }
            }
        };

        let rel = (cost - new_cost) / cost.max(f64::MIN_POSITIVE);
        values = candidate;
        cost = new_cost;
        costs.push(cost);
        debug!("iteration {iterations}: cost {cost:.6e}, rel change {rel:.3e}");
        if rel < cfg.cost_tolerance || step.amax() < cfg.step_tolerance || cost == 0.0 {
            converged = true;
            break;
        }
    }

    Ok(SolutionReport {
        values,
        iterations,
        final_cost: cost,
        converged,
        per_iteration_costs: costs,
    })
}

/// Sub-block of `(AᵀA)⁻¹` for `keys`, with kernel weights frozen at
/// `values`. Rows and columns follow the order of `keys`.
pub fn marginal_covariance(
    graph: &FactorGraph,
    values: &Values,
    keys: &[VariableKey],
) -> Result<DMatrix<f64>> {
    let mut blocks = marginal_blocks(graph, values, &[keys.to_vec()])?;
    Ok(blocks.pop().expect("one group requested"))
}

/// One joint covariance block per group of keys, sharing a single
/// factorization.
pub fn marginal_blocks(
    graph: &FactorGraph,
    values: &Values,
    groups: &[Vec<VariableKey>],
) -> Result<Vec<DMatrix<f64>>> {
    check_complete(graph, values)?;
    let system = graph.linearize(values)?;
    let ordering = &system.ordering;
    let ne = system.normal_equations();
    let fact = factorize(graph, ordering, &ne.h, 0.0, &SolverConfig::default())?;

    let mut unit = DVector::zeros(ordering.total_dim());
    let mut out = Vec::with_capacity(groups.len());
    for keys in groups {
        let ranges = keys
            .iter()
            .map(|k| ordering.range(k).ok_or(Error::MissingKey(*k)))
            .collect::<Result<Vec<_>>>()?;
        let cols: Vec<usize> = ranges.iter().flat_map(|r| r.clone()).collect();
        let m = cols.len();
        let mut cov = DMatrix::zeros(m, m);
        for (j, &cj) in cols.iter().enumerate() {
            unit[cj] = 1.0;
            let x = fact.solve(&unit);
            unit[cj] = 0.0;
            for (i, &ci) in cols.iter().enumerate() {
                cov[(i, j)] = x[ci];
            }
        }
        out.push((&cov + cov.transpose()) * 0.5);
    }
    Ok(out)
}
