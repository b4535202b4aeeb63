mod common;

use common::*;
use gnss_fgo::ambiguity::*;
use gnss_fgo::factors::*;
use gnss_fgo::graph::ColumnOrdering;
use gnss_fgo::robust::huber_weight;
use gnss_fgo::scenario::{elevation_sigma, generate, ScenarioConfig};
use gnss_fgo::stats::{ErrorMetric, ErrorStats};
use gnss_fgo::{
    solve, Factor, FactorGraph, FactorKind, RobustKernel, SolverConfig, Values, VarKind,
    VariableKey,
};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::seq::SliceRandom;

fn config(cases: u32) -> ProptestConfig {
    ProptestConfig::with_cases(cases)
}

proptest! {
    #![proptest_config(config(64))]

    #[test]
    fn evaluate_error_is_affine(seed in any::<u64>(), alpha in -3.0..3.0f64, beta in -3.0..3.0f64) {
        let mut rng = rng(seed);
        let keys = random_keys(&mut rng, 4);
        let f = random_factor(&mut rng, &keys);
        let v1 = random_values(&mut rng, &keys);
        let v2 = random_values(&mut rng, &keys);
        let mut mix = Values::new();
        for k in &keys {
            mix.insert(*k, v1.get(k).unwrap() * alpha + v2.get(k).unwrap() * beta).unwrap();
        }
        let lhs = f.evaluate_error(&mix).unwrap();
        let rhs = f.evaluate_error(&v1).unwrap() * alpha + f.evaluate_error(&v2).unwrap() * beta
            + f.constant() * (alpha + beta - 1.0);
        prop_assert!((lhs - rhs).amax() < 1e-9);
    }

    #[test]
    fn column_ranges_are_contiguous(seed in any::<u64>(), n in 1usize..20) {
        let mut rng = rng(seed);
        let keys = random_keys(&mut rng, n);
        let ord = ColumnOrdering::new(keys.clone());
        let mut next = 0;
        for (key, range) in ord.iter() {
            prop_assert_eq!(range.start, next);
            prop_assert_eq!(range.len(), key.dim);
            next = range.end;
        }
        prop_assert_eq!(next, ord.total_dim());
        prop_assert_eq!(ord.num_blocks(), n);
    }

    #[test]
    fn huber_influence_is_continuous(k in 0.05..10.0f64, eps in 1e-12..1e-9f64) {
        let inside = huber_weight(k - eps, k) * (k - eps);
        let outside = huber_weight(k + eps, k) * (k + eps);
        prop_assert!((inside - outside).abs() < 1e-8);
        prop_assert!(huber_weight(k + 1.0, k) < 1.0);
        prop_assert_eq!(huber_weight(k * 0.5, k), 1.0);
    }

    #[test]
    fn sd_errors_ignore_clock_offsets(seed in any::<u64>(), shift in -1e3..1e3f64) {
        let mut rng = rng(seed);
        let layout = SystemBiasLayout::new(GnssSystem::Gps, vec![GnssSystem::Gal]);
        let obs = random_obs(&mut rng, "G01", GnssSystem::Gps);
        let refo = random_obs(&mut rng, "G02", GnssSystem::Gps);
        let dim = layout.clock_dim();
        let mut v = Values::new();
        v.insert(VariableKey::position(1), random_vector(&mut rng, 3, 5.0)).unwrap();
        v.insert(VariableKey::velocity(1), random_vector(&mut rng, 3, 5.0)).unwrap();
        v.insert(VariableKey::clock(1, dim), random_vector(&mut rng, dim, 50.0)).unwrap();
        v.insert(VariableKey::drift(1), random_vector(&mut rng, 1, 5.0)).unwrap();
        let mut shifted = v.clone();
        shifted.insert(VariableKey::clock(1, dim), v.get(&VariableKey::clock(1, dim)).unwrap().add_scalar(shift)).unwrap();
        shifted.insert(VariableKey::drift(1), v.get(&VariableKey::drift(1)).unwrap().add_scalar(shift)).unwrap();

        let sd = pseudorange_sd_factor(&obs, &refo, 1, 1.0, false).unwrap();
        let vel = doppler_velocity_sd_factor(&obs, &refo, 1, &nalgebra::Vector3::zeros(), 1.0, false).unwrap();
        for f in [&sd, &vel] {
            prop_assert_eq!(f.evaluate_error(&v).unwrap(), f.evaluate_error(&shifted).unwrap());
        }
        let a = pseudorange_factor(&obs, 1, &layout, 1.0).unwrap();
        let b = pseudorange_factor(&refo, 1, &layout, 1.0).unwrap();
        for vals in [&v, &shifted] {
            let diff = a.evaluate_error(vals).unwrap() - b.evaluate_error(vals).unwrap();
            prop_assert!((sd.evaluate_error(vals).unwrap() - diff).amax() < 1e-9);
        }
    }

    #[test]
    fn sigma_never_grows_with_elevation(e1 in 0.01..std::f64::consts::FRAC_PI_2, e2 in 0.01..std::f64::consts::FRAC_PI_2, a in 0.01..2.0f64, b in 0.01..2.0f64) {
        let (lo, hi) = if e1 <= e2 { (e1, e2) } else { (e2, e1) };
        prop_assert!(elevation_sigma(hi, a, b).unwrap() <= elevation_sigma(lo, a, b).unwrap());
    }

    #[test]
    fn stats_percentiles_are_ordered(errors in prop::collection::vec(0.0..100.0f64, 1..200)) {
        let s = ErrorStats::from_errors(&errors, ErrorMetric::ThreeD).unwrap();
        prop_assert!(s.p95 >= s.p50);
        prop_assert_eq!(s.sdc_score, (s.p50 + s.p95) / 2.0);
        prop_assert_eq!(s.count, errors.len());
    }

    #[test]
    fn integer_search_properties(seed in any::<u64>(), n in 1usize..7, gamma in 0.01..100.0f64) {
        let mut rng = rng(seed);
        let a = random_matrix(&mut rng, n, n);
        let q = &a * a.transpose() + DMatrix::identity(n, n) * 0.05;
        let q = (&q + q.transpose()) * 0.5;
        let p = AmbiguityProblem::new(random_vector(&mut rng, n, 20.0), q).unwrap();
        let c = search_integers(&p).unwrap();
        prop_assert!(c.q_best <= c.q_second);
        prop_assert_ne!(&c.best, &c.second);
        let rounded = p.float_amb.map(|x| x.round() as i64);
        prop_assert!(c.q_best <= p.mahalanobis(&rounded).unwrap() + 1e-9);

        let dec = decorrelate(&p).unwrap();
        let t = search_integers(&dec.problem).unwrap();
        prop_assert_eq!(dec.back_transform(&t.best), c.best.clone());

        let scaled = AmbiguityProblem::new(p.float_amb.clone(), &p.q * gamma).unwrap();
        let s = search_integers(&scaled).unwrap();
        prop_assert_eq!(ratio_test(&s, 2.0), ratio_test(&c, 2.0));
    }
}

proptest! {
    #![proptest_config(config(24))]

    #[test]
    fn insertion_order_does_not_matter(seed in any::<u64>()) {
        let mut rng = rng(seed);
        let (g, keys) = random_graph(&mut rng, 8, 12);
        let mut factors: Vec<Factor> = g.factors().to_vec();
        factors.shuffle(&mut rng);
        let mut h = FactorGraph::new();
        for f in factors {
            h.add(f).unwrap();
        }
        let cfg = SolverConfig::default();
        let a = solve(&g, &g.zero_values(), &cfg).unwrap();
        let b = solve(&h, &h.zero_values(), &cfg).unwrap();
        prop_assert!((flatten(&a.values, &keys) - flatten(&b.values, &keys)).amax() < 1e-9);
    }

    #[test]
    fn accepted_costs_never_increase(seed in any::<u64>()) {
        let mut rng = rng(seed);
        let (g, _) = random_graph(&mut rng, 6, 10);
        let mut h = FactorGraph::new();
        for f in g.factors() {
            h.add(f.clone().with_kernel(RobustKernel::huber(1.345)).unwrap()).unwrap();
        }
        let r = solve(&h, &h.zero_values(), &SolverConfig::default()).unwrap();
        for w in r.per_iteration_costs.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-12));
        }
    }

    #[test]
    fn key_dimension_is_fixed(dim in 1usize..6, other in 1usize..6) {
        prop_assume!(dim != other);
        let mut g = FactorGraph::new();
        let key = VariableKey::new(VarKind::Ambiguity, 0, dim);
        let f = Factor::with_uniform_sigma(
            FactorKind::Custom,
            vec![key],
            vec![DMatrix::identity(dim, dim)],
            DVector::zeros(dim),
            1.0,
        )
        .unwrap();
        g.add(f).unwrap();
        let key2 = VariableKey::new(VarKind::Ambiguity, 0, other);
        let f2 = Factor::with_uniform_sigma(
            FactorKind::Custom,
            vec![key2],
            vec![DMatrix::identity(other, other)],
            DVector::zeros(other),
            1.0,
        )
        .unwrap();
        prop_assert!(g.add(f2).is_err());
    }
}

proptest! {
    #![proptest_config(config(12))]

    #[test]
    fn generated_truth_is_consistent(seed in any::<u64>()) {
        let mut cfg = ScenarioConfig::urban_example1(seed);
        cfg.n_epochs = 40;
        cfg.outliers.cycle_slip_prob = 0.03;
        let (records, truth) = generate(&cfg).unwrap();
        let (again, _) = generate(&cfg).unwrap();
        prop_assert_eq!(&records, &again);
        let mut arc_integers = std::collections::BTreeMap::new();
        for (rec, te) in records.iter().zip(&truth.epochs) {
            for (o, t) in rec.sats.iter().zip(&te.sats) {
                prop_assert_eq!(&o.sat_id, &t.sat_id);
                let sigma = elevation_sigma(o.elevation, cfg.noise.psr_a, cfg.noise.psr_b).unwrap();
                if t.nlos {
                    prop_assert!(t.psr_error >= cfg.outliers.bias_low);
                } else {
                    prop_assert!(t.psr_error.abs() <= 6.0 * sigma);
                }
                if let Some(n) = t.dd_integer {
                    let prev = arc_integers.insert((t.arc, o.sat_id.clone()), n);
                    prop_assert!(prev.is_none() || prev == Some(n));
                }
            }
        }
    }
}
