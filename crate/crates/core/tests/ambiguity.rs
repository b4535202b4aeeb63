mod common;

use common::*;
use gnss_fgo::ambiguity::*;
use gnss_fgo::factors::*;
use gnss_fgo::{Factor, FactorGraph, FactorKind, SolverConfig, VariableKey};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn random_problem(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> AmbiguityProblem {
    let a = random_matrix(rng, n, n) * scale;
    let q = &a * a.transpose() + DMatrix::identity(n, n) * (0.01 * scale * scale);
    let q = (&q + q.transpose()) * 0.5;
    let float = random_vector(rng, n, 10.0);
    AmbiguityProblem::new(float, q).unwrap()
}

fn objective(p: &AmbiguityProblem, a: &[i64]) -> f64 {
    let d = DVector::from_iterator(a.len(), a.iter().map(|&x| x as f64)) - &p.float_amb;
    let qi = p.q.clone().try_inverse().unwrap();
    (d.transpose() * qi * d)[0]
}

/// Exhaustive best and second best over the ±3 box around the float vector.
fn brute_force(p: &AmbiguityProblem) -> (Vec<i64>, f64, Vec<i64>, f64) {
    let c: Vec<i64> = p.float_amb.iter().map(|x| x.round() as i64).collect();
    let mut all = Vec::new();
    for i in -3..=3 {
        for j in -3..=3 {
            for k in -3..=3 {
                let a = vec![c[0] + i, c[1] + j, c[2] + k];
                all.push((objective(p, &a), a));
            }
        }
    }
    all.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
    (all[0].1.clone(), all[0].0, all[1].1.clone(), all[1].0)
}

#[test]
fn search_matches_exhaustive_enumeration() {
    let mut rng = rng(31);
    for _ in 0..100 {
        let p = random_problem(&mut rng, 3, 0.4);
        let c = search_integers(&p).unwrap();
        let (best, qb, second, qs) = brute_force(&p);
        assert_eq!(c.best.as_slice(), best.as_slice());
        assert_eq!(c.second.as_slice(), second.as_slice());
        assert!((c.q_best - qb).abs() < 1e-8 * qb.max(1.0));
        assert!((c.q_second - qs).abs() < 1e-8 * qs.max(1.0));
    }
}

#[test]
fn search_is_invariant_under_decorrelation() {
    let mut rng = rng(32);
    for _ in 0..50 {
        let n = rng.random_range(2..=6);
        let p = random_problem(&mut rng, n, 0.8);
        let dec = decorrelate(&p).unwrap();
        let direct = search_integers(&p).unwrap();
        let transformed = search_integers(&dec.problem).unwrap();
        assert_eq!(dec.back_transform(&transformed.best), direct.best);
        let zf = dec.back_transform_float(&dec.problem.float_amb);
        assert!((zf - &p.float_amb).amax() < 1e-9);
        let prod = dec.z.clone() * dec.z_inv.clone();
        assert_eq!(prod, DMatrix::<i64>::identity(n, n));
    }
}

#[test]
fn best_never_worse_than_rounding() {
    let mut rng = rng(33);
    for _ in 0..50 {
        let n = rng.random_range(1..=8);
        let p = random_problem(&mut rng, n, 1.0);
        let c = search_integers(&p).unwrap();
        let rounded = p.float_amb.map(|x| x.round() as i64);
        assert!(c.q_best <= p.mahalanobis(&rounded).unwrap() + 1e-9);
        assert!(c.q_best <= c.q_second);
        assert_ne!(c.best, c.second);
    }
}

#[test]
fn ratio_decision_is_scale_invariant() {
    let mut rng = rng(34);
    for _ in 0..30 {
        let p = random_problem(&mut rng, 4, 0.3);
        let c = search_integers(&p).unwrap();
        for gamma in [0.01, 0.5, 7.0, 1e3] {
            let scaled = AmbiguityProblem::new(p.float_amb.clone(), &p.q * gamma).unwrap();
            let s = search_integers(&scaled).unwrap();
            assert_eq!(s.best, c.best);
            assert_eq!(ratio_test(&s, 2.0), ratio_test(&c, 2.0));
        }
    }
}

#[test]
fn decorrelation_examples() {
    let p =
        AmbiguityProblem::new(DVector::from_vec(vec![0.3, -1.2]), DMatrix::identity(2, 2)).unwrap();
    let dec = decorrelate(&p).unwrap();
    for v in dec.z.iter() {
        assert!(*v == 0 || v.abs() == 1);
    }
    assert!((dec.problem.q.clone() - DMatrix::identity(2, 2)).amax() < 1e-12);

    let q = DMatrix::from_row_slice(2, 2, &[1.0, 0.9, 0.9, 1.0]);
    let p = AmbiguityProblem::new(DVector::from_vec(vec![0.3, -1.2]), q).unwrap();
    let dec = decorrelate(&p).unwrap();
    let corr = |q: &DMatrix<f64>| (q[(0, 1)] / (q[(0, 0)] * q[(1, 1)]).sqrt()).abs();
    assert!(corr(&dec.problem.q) < 0.9);
}

#[test]
fn search_examples() {
    let p =
        AmbiguityProblem::new(DVector::from_vec(vec![0.1, -0.2]), DMatrix::identity(2, 2)).unwrap();
    assert_eq!(search_integers(&p).unwrap().best.as_slice(), &[0, 0]);
    let p =
        AmbiguityProblem::new(DVector::from_vec(vec![0.5, 0.0]), DMatrix::identity(2, 2)).unwrap();
    let c = search_integers(&p).unwrap();
    assert_eq!(c.best.as_slice(), &[0, 0]);
    assert!((c.q_best - 0.25).abs() < 1e-12 && (c.q_second - 0.25).abs() < 1e-12);
}

#[test]
fn ratio_examples() {
    let cand = |qb: f64, qs: f64| IntegerCandidates {
        best: DVector::from_vec(vec![0]),
        second: DVector::from_vec(vec![1]),
        q_best: qb,
        q_second: qs,
    };
    assert_eq!(ratio_test(&cand(1.0, 2.5), 2.0), RatioDecision::Fixed);
    assert_eq!(ratio_test(&cand(1.0, 1.5), 2.0), RatioDecision::Float);
    assert_eq!(ratio_test(&cand(0.0, 0.0), 2.0), RatioDecision::Float);
    assert_eq!(ratio_test(&cand(0.0, 1.0), 2.0), RatioDecision::Fixed);
}

#[test]
fn non_spd_is_rejected() {
    let q = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
    assert!(AmbiguityProblem::new(DVector::zeros(2), q).is_err());
    let q = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.2, 1.0]);
    assert!(AmbiguityProblem::new(DVector::zeros(2), q).is_err());
}

#[test]
fn fixing_equals_removing_ambiguities() {
    let mut rng = rng(35);
    let lambda = 0.190_293_672_798_364_9;
    let amb = VariableKey::ambiguity(0, 4);
    let x = VariableKey::position(0);
    let ints = DVector::from_vec(vec![3i64, -7, 12, 0]);
    let mut full = FactorGraph::new();
    let mut reduced = FactorGraph::new();
    for i in 0..6 {
        let j = random_matrix(&mut rng, 1, 3);
        let c = rng.random_range(-5.0..5.0);
        let f = Factor::with_uniform_sigma(
            FactorKind::Custom,
            vec![x],
            vec![j],
            DVector::from_element(1, c),
            0.5,
        )
        .unwrap();
        full.add(f.clone()).unwrap();
        reduced.add(f).unwrap();
        if i < 4 {
            let mut o = SatObservation {
                sat_id: format!("G{i}"),
                system: GnssSystem::Gps,
                elevation: 0.5,
                azimuth: 0.0,
                los_unit: [0.0, 0.0, -1.0],
                psr_residual: 0.0,
                dopp_residual: 0.0,
                tdcp_residual: 0.0,
                dd_carrier_residual: rng.random_range(-5.0..5.0),
                wavelength: lambda,
                snr: 45.0,
                flags: ObsFlags {
                    has_ddcp: true,
                    ..ObsFlags::default()
                },
            };
            let los = random_vector(&mut rng, 3, 1.0).normalize();
            o.los_unit = [los[0], los[1], los[2]];
            let mut r = o.clone();
            r.sat_id = "G9".into();
            r.los_unit = [0.0, 0.0, -1.0];
            let f = dd_carrier_factor(&o, &r, 0, amb, i, 0.004).unwrap();
            full.add(f.clone()).unwrap();
            let shifted = f.constant() - DVector::from_element(1, lambda * ints[i] as f64);
            let g = Factor::with_uniform_sigma(
                FactorKind::Custom,
                vec![x],
                vec![f.jacobian(&x).unwrap().clone()],
                shifted,
                0.004,
            )
            .unwrap();
            reduced.add(g).unwrap();
        }
    }
    let cfg = SolverConfig::default();
    let float = gnss_fgo::solve(&full, &full.zero_values(), &cfg).unwrap();
    let fixed = fix_solution(&full, &float.values, &[(amb, ints.clone())], &cfg).unwrap();
    let oracle = gnss_fgo::solve(&reduced, &reduced.zero_values(), &cfg).unwrap();
    let a = fixed.values.get(&x).unwrap();
    let b = oracle.values.get(&x).unwrap();
    assert!((a - b).amax() < 1e-8, "{a} vs {b}");
    let bf = fixed.values.get(&amb).unwrap();
    assert!((bf - ints.map(|v| v as f64)).amax() < 1e-5);
}
