#![allow(dead_code)]

use gnss_fgo::factors::*;
use gnss_fgo::graph::Anchor;
use gnss_fgo::{Factor, FactorGraph, FactorKind, Values, VarKind, VariableKey};
use nalgebra::{DMatrix, DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_keys(rng: &mut ChaCha8Rng, n: usize) -> Vec<VariableKey> {
    let kinds = [
        (VarKind::PositionError, 3),
        (VarKind::Clock, 2),
        (VarKind::VelocityError, 3),
        (VarKind::ClockDrift, 1),
        (VarKind::Ambiguity, 4),
    ];
    (0..n)
        .map(|i| {
            let (kind, dim) = kinds[rng.random_range(0..kinds.len())];
            VariableKey::new(kind, i, dim)
        })
        .collect()
}

pub fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
}

pub fn random_vector(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.random_range(-scale..scale))
}

/// Random factor over one to three of `keys`.
pub fn random_factor(rng: &mut ChaCha8Rng, keys: &[VariableKey]) -> Factor {
    let rows = rng.random_range(1..=3);
    let n = rng.random_range(1..=3.min(keys.len()));
    let mut idx: Vec<usize> = (0..keys.len()).collect();
    for i in 0..n {
        let j = rng.random_range(i..idx.len());
        idx.swap(i, j);
    }
    let fk: Vec<VariableKey> = idx[..n].iter().map(|&i| keys[i]).collect();
    let jac = fk.iter().map(|k| random_matrix(rng, rows, k.dim)).collect();
    let constant = random_vector(rng, rows, 5.0);
    let sigma = DVector::from_fn(rows, |_, _| rng.random_range(0.5..2.0));
    Factor::new(FactorKind::Custom, fk, jac, constant, sigma).unwrap()
}

/// Well-posed random graph: one full-rank factor per key plus random
/// couplings.
pub fn random_graph(
    rng: &mut ChaCha8Rng,
    n_keys: usize,
    n_extra: usize,
) -> (FactorGraph, Vec<VariableKey>) {
    let keys = random_keys(rng, n_keys);
    let mut g = FactorGraph::new();
    for k in &keys {
        let j = DMatrix::identity(k.dim, k.dim) + 0.3 * random_matrix(rng, k.dim, k.dim);
        let c = random_vector(rng, k.dim, 5.0);
        let s = DVector::from_fn(k.dim, |_, _| rng.random_range(0.5..2.0));
        g.add(Factor::new(FactorKind::Custom, vec![*k], vec![j], c, s).unwrap())
            .unwrap();
    }
    for _ in 0..n_extra {
        g.add(random_factor(rng, &keys)).unwrap();
    }
    (g, keys)
}

pub fn random_values(rng: &mut ChaCha8Rng, keys: &[VariableKey]) -> Values {
    let mut v = Values::new();
    for k in keys {
        v.insert(*k, random_vector(rng, k.dim, 3.0)).unwrap();
    }
    v
}

pub fn column_offsets(keys: &[VariableKey]) -> (Vec<usize>, usize) {
    let mut off = Vec::new();
    let mut n = 0;
    for k in keys {
        off.push(n);
        n += k.dim;
    }
    (off, n)
}

/// Stacked, unwhitened `(J, constant, sigma)` of a graph in `keys` column order.
pub fn dense_stack(
    g: &FactorGraph,
    keys: &[VariableKey],
) -> (DMatrix<f64>, DVector<f64>, DVector<f64>) {
    let (off, n) = column_offsets(keys);
    let m: usize = g.factors().iter().map(|f| f.dim()).sum();
    let mut a = DMatrix::zeros(m, n);
    let mut b = DVector::zeros(m);
    let mut s = DVector::zeros(m);
    let mut row = 0;
    for f in g.factors() {
        for (k, j) in f.keys().iter().zip(f.jacobians()) {
            let col = off[keys.iter().position(|x| x == k).unwrap()];
            a.view_mut((row, col), (j.nrows(), j.ncols())).copy_from(j);
        }
        b.rows_mut(row, f.dim()).copy_from(f.constant());
        s.rows_mut(row, f.dim()).copy_from(f.sigma());
        row += f.dim();
    }
    (a, b, s)
}

pub fn flatten(v: &Values, keys: &[VariableKey]) -> DVector<f64> {
    let parts: Vec<f64> = keys
        .iter()
        .flat_map(|k| v.get(k).unwrap().iter().copied().collect::<Vec<_>>())
        .collect();
    DVector::from_vec(parts)
}

/// Weighted least squares through an SVD of the whitened system.
pub fn dense_wls(g: &FactorGraph, keys: &[VariableKey]) -> DVector<f64> {
    let (a, b, s) = dense_stack(g, keys);
    let mut aw = a.clone();
    let mut bw = b.clone();
    for r in 0..a.nrows() {
        aw.row_mut(r).scale_mut(1.0 / s[r]);
        bw[r] /= s[r];
    }
    aw.svd(true, true).solve(&bw, 1e-14).unwrap()
}

/// Full inverse of the whitened information matrix.
pub fn dense_covariance(g: &FactorGraph, keys: &[VariableKey]) -> DMatrix<f64> {
    let (a, _, s) = dense_stack(g, keys);
    let mut aw = a.clone();
    for r in 0..a.nrows() {
        aw.row_mut(r).scale_mut(1.0 / s[r]);
    }
    (aw.transpose() * aw).try_inverse().unwrap()
}

pub const STEP: f64 = 1e-5;

pub fn unit(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let az = rng.random_range(0.0..std::f64::consts::TAU);
    let el = rng.random_range(0.1..1.5f64);
    [-el.cos() * az.sin(), -el.cos() * az.cos(), -el.sin()]
}

pub fn random_obs(rng: &mut ChaCha8Rng, id: &str, system: GnssSystem) -> SatObservation {
    let los = unit(rng);
    SatObservation {
        sat_id: id.into(),
        system,
        elevation: (-los[2]).asin(),
        azimuth: 0.0,
        los_unit: los,
        psr_residual: rng.random_range(-50.0..50.0),
        dopp_residual: rng.random_range(-5.0..5.0),
        tdcp_residual: rng.random_range(-5.0..5.0),
        dd_carrier_residual: rng.random_range(-5.0..5.0),
        wavelength: 0.190_293_672_798_364_9,
        snr: 45.0,
        flags: ObsFlags {
            has_psr: true,
            has_dopp: true,
            has_tdcp: true,
            has_ddcp: true,
            cycle_slip: false,
        },
    }
}

pub fn random_anchor(rng: &mut ChaCha8Rng) -> Anchor {
    Anchor::new(
        Vector3::from_fn(|_, _| rng.random_range(-100.0..100.0)),
        Vector3::from_fn(|_, _| rng.random_range(-10.0..10.0)),
    )
}

pub fn values_for(rng: &mut ChaCha8Rng, f: &Factor) -> Values {
    let mut v = Values::new();
    for k in f.keys() {
        v.insert(*k, random_vector(rng, k.dim, 10.0)).unwrap();
    }
    v
}

/// First Jacobian entry that disagrees with central differences of
/// `evaluate_error` by more than 1e-6, if any.
pub fn fd_mismatch(f: &Factor, v: &Values) -> Option<String> {
    for (k, jac) in f.keys().iter().zip(f.jacobians()) {
        for c in 0..k.dim {
            let mut plus = v.clone();
            let mut minus = v.clone();
            let mut x = v.get(k).unwrap().clone();
            x[c] += STEP;
            plus.insert(*k, x.clone()).unwrap();
            x[c] -= 2.0 * STEP;
            minus.insert(*k, x).unwrap();
            let fd = (f.evaluate_error(&plus).unwrap() - f.evaluate_error(&minus).unwrap())
                / (2.0 * STEP);
            for r in 0..f.dim() {
                if (fd[r] - jac[(r, c)]).abs() >= 1e-6 {
                    return Some(format!(
                        "{:?} key {k} row {r} col {c}: fd {} analytic {}",
                        f.kind(),
                        fd[r],
                        jac[(r, c)]
                    ));
                }
            }
        }
    }
    None
}

pub fn layout() -> SystemBiasLayout {
    SystemBiasLayout::new(
        GnssSystem::Gps,
        vec![GnssSystem::Glo, GnssSystem::Gal, GnssSystem::Bds],
    )
}

pub fn all_factors(rng: &mut ChaCha8Rng) -> Vec<Factor> {
    let lay = layout();
    let systems = [
        GnssSystem::Gps,
        GnssSystem::Glo,
        GnssSystem::Gal,
        GnssSystem::Bds,
    ];
    let sys = systems[rng.random_range(0..4)];
    let o = random_obs(rng, "A", sys);
    let r = random_obs(rng, "B", sys);
    let po = random_obs(rng, "A", sys);
    let pr = random_obs(rng, "B", sys);
    let v0 = Vector3::from_fn(|_, _| rng.random_range(-10.0..10.0));
    let (a0, a1) = (random_anchor(rng), random_anchor(rng));
    let dt = rng.random_range(0.1..2.0);
    let epoch = rng.random_range(1..50);
    let amb = VariableKey::ambiguity(epoch, 4);
    let avg = AveragedDoppler::from_pair(&po, &o).unwrap();
    let avg_ref = AveragedDoppler::from_pair(&pr, &r).unwrap();
    vec![
        pseudorange_factor(&o, epoch, &lay, 0.5).unwrap(),
        pseudorange_sd_factor(&o, &r, epoch, 0.7, false).unwrap(),
        doppler_velocity_factor(&o, epoch, &v0, 0.05).unwrap(),
        doppler_velocity_sd_factor(&o, &r, epoch, &v0, 0.07, false).unwrap(),
        doppler_tdpos_factor(&avg, epoch, dt, &a0, &a1, &lay, 0.1).unwrap(),
        doppler_tdpos_sd_factor(&avg, &avg_ref, epoch, dt, &a0, &a1, 0.1, false).unwrap(),
        tdcp_factor(&po, &o, epoch, &lay, 0.01).unwrap(),
        tdcp_sd_factor(&po, &pr, &o, &r, epoch, 0.01, false).unwrap(),
        dd_carrier_factor(&o, &r, epoch, amb, rng.random_range(0..4), 0.004).unwrap(),
        motion_factor(epoch, dt, &a0, &a1, 0.05).unwrap(),
        clock_factor(epoch, dt, lay.clock_dim(), 0.1, 0.01).unwrap(),
        clock_const_factor(epoch, lay.clock_dim(), 0.1).unwrap(),
        prior_factor(
            VariableKey::position(epoch),
            &random_vector(rng, 3, 5.0),
            2.0,
        )
        .unwrap(),
    ]
}
