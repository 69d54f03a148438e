mod common;

use common::{fd_gradient, oracle_em_step, ols_loglik, random_data, random_params};
use mlc_core::mlc::{
    canonicalize, e_step, e_step_patient_level, fit_grouped, initial_params, m_step, run_chain, Covariate, EmConfig,
    GroupedData, InitScheme, MlcParams, ModelSpec,
};
use mlc_core::rng::rng_from;
use proptest::prelude::*;

fn spec(pc: usize, t: usize, p: usize) -> ModelSpec {
    let covariates = [Covariate::Age, Covariate::Sex, Covariate::Ses][..p].to_vec();
    ModelSpec { n_patient_classes: pc, n_trust_classes: t, covariates }
}

fn assert_params_close(a: &MlcParams, b: &MlcParams, tol: f64) {
    let flat = |p: &MlcParams| {
        let mut v: Vec<f64> = p.trust_class_weights.clone();
        v.extend(p.patient_class_weights.iter().flatten());
        v.extend(p.intercepts.iter().flatten());
        v.extend(&p.slopes);
        v.push(p.resid_variance);
        v
    };
    for (x, y) in flat(a).iter().zip(flat(b)) {
        assert!((x - y).abs() <= tol * (1.0 + y.abs()), "{x} vs {y}\n{a:?}\n{b:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn em_never_decreases_the_loglik(seed in any::<u64>(), t in 1usize..4, pc in 1usize..3, p in 1usize..3) {
        let mut rng = rng_from(seed);
        let data = random_data(&mut rng, 6, 4, 20, p, 2, 1.0, 0.8, 0.6);
        let mut params = initial_params(&data, &spec(pc, t, p), InitScheme::TrustSeeded, &mut rng).unwrap();
        let mut prev = f64::NEG_INFINITY;
        for _ in 0..60 {
            let e = e_step(&params, &data).unwrap();
            prop_assert!(e.loglik >= prev - 1e-9 * prev.abs().max(1.0), "{} after {}", e.loglik, prev);
            for row in &e.trust_posteriors {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-10);
            }
            prev = e.loglik;
            match m_step(&e, &data, &spec(pc, t, p)) {
                Ok(next) => params = next,
                Err(_) => break,
            }
        }
    }

    #[test]
    fn em_step_matches_independent_implementation(seed in any::<u64>(), t in 1usize..4, pc in 1usize..3, p in 1usize..3) {
        let mut rng = rng_from(seed);
        let data = random_data(&mut rng, 5, 3, 12, p, 3, 0.7, 1.0, 0.5);
        let mut params = random_params(&mut rng, t, pc, p);
        for _ in 0..5 {
            let ours = m_step(&e_step(&params, &data).unwrap(), &data, &spec(pc, t, p)).unwrap();
            let oracle = oracle_em_step(&params, &data);
            assert_params_close(&ours, &oracle, 1e-9);
            let dying = oracle.trust_class_weights.iter().chain(oracle.patient_class_weights.iter().flatten());
            if dying.into_iter().any(|&w| w < mlc_core::mlc::MIN_CLASS_WEIGHT) {
                break;
            }
            params = oracle;
        }
    }

    #[test]
    fn collapsed_and_patient_level_routes_agree(seed in any::<u64>(), t in 1usize..5, p in 1usize..4) {
        let mut rng = rng_from(seed);
        let data = random_data(&mut rng, 7, 2, 15, p, 2, 0.5, 0.0, 0.8);
        let params = random_params(&mut rng, t, 1, p);
        let a = e_step(&params, &data).unwrap();
        let b = e_step_patient_level(&params, &data).unwrap();
        prop_assert!((a.loglik - b.loglik).abs() <= 1e-10 * a.loglik.abs().max(1.0));
    }

    #[test]
    fn shifting_outcomes_shifts_intercepts_only(seed in any::<u64>(), shift in -5.0f64..5.0) {
        let mut rng = rng_from(seed);
        let data = random_data(&mut rng, 6, 5, 15, 1, 2, 1.5, 0.0, 0.4);
        let shifted = data.map_outcomes(|y| y + shift);
        let mut params = random_params(&mut rng, 2, 1, 1);
        let mut moved = params.clone();
        moved.intercepts.iter_mut().flatten().for_each(|a| *a += shift);
        let s = spec(1, 2, 1);
        for _ in 0..10 {
            let e1 = e_step(&params, &data).unwrap();
            let e2 = e_step(&moved, &shifted).unwrap();
            for (r1, r2) in e1.trust_posteriors.iter().zip(&e2.trust_posteriors) {
                for (a, b) in r1.iter().zip(r2) {
                    prop_assert!((a - b).abs() < 1e-8);
                }
            }
            params = m_step(&e1, &data, &s).unwrap();
            moved = m_step(&e2, &shifted, &s).unwrap();
        }
        for c in 0..2 {
            prop_assert!((moved.intercepts[c][0] - params.intercepts[c][0] - shift).abs() < 1e-7);
        }
    }

    #[test]
    fn relabelled_start_reaches_the_same_canonical_fit(seed in any::<u64>()) {
        let mut rng = rng_from(seed);
        let data = random_data(&mut rng, 8, 10, 30, 1, 3, 1.0, 0.0, 0.5);
        let s = spec(1, 3, 1);
        let init = initial_params(&data, &s, InitScheme::TrustSeeded, &mut rng).unwrap();
        let order = [2, 0, 1];
        let permuted = MlcParams {
            trust_class_weights: order.iter().map(|&c| init.trust_class_weights[c]).collect(),
            patient_class_weights: order.iter().map(|&c| init.patient_class_weights[c].clone()).collect(),
            intercepts: order.iter().map(|&c| init.intercepts[c].clone()).collect(),
            ..init.clone()
        };
        let em = EmConfig { rel_tol: 1e-12, max_iter: 2000, ..EmConfig::default() };
        if let (Ok(a), Ok(b)) = (run_chain(&data, &s, init, &em), run_chain(&data, &s, permuted, &em)) {
            let (pa, qa) = canonicalize(&a.params, &a.estep.trust_posteriors);
            let (pb, qb) = canonicalize(&b.params, &b.estep.trust_posteriors);
            prop_assert!((a.estep.loglik - b.estep.loglik).abs() < 1e-9 * a.estep.loglik.abs());
            assert_params_close(&pa, &pb, 1e-7);
            for (ra, rb) in qa.iter().zip(&qb) {
                for (x, y) in ra.iter().zip(rb) {
                    prop_assert!((x - y).abs() < 1e-7);
                }
            }
        }
    }
}

#[test]
fn single_class_fit_is_ordinary_least_squares() {
    let mut rng = rng_from(11);
    for p in 1..=3 {
        let data = random_data(&mut rng, 9, 10, 40, p, 3, 0.8, 0.3, 0.7);
        let fit = fit_grouped(&data, &spec(1, 1, p), &EmConfig::default()).unwrap();
        let ols = ols_loglik(&data);
        assert!(((fit.loglik - ols) / ols).abs() < 1e-8, "{} vs {ols}", fit.loglik);
        assert!(fit.converged && fit.iterations <= 2);
    }
}

#[test]
fn converged_fits_are_stationary() {
    let mut rng = rng_from(5);
    let mut checked = 0;
    for _ in 0..20 {
        let data = random_data(&mut rng, 8, 10, 30, 2, 2, 1.2, 0.0, 0.5);
        let s = spec(1, 2, 2);
        let em = EmConfig { rel_tol: 1e-13, max_iter: 20_000, n_restarts: 4, ..EmConfig::default() };
        let Ok(fit) = fit_grouped(&data, &s, &em) else { continue };
        if !fit.converged {
            continue;
        }
        let g = fd_gradient(&fit.params, &data, 1e-5);
        let worst = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(worst < 1e-3, "gradient {g:?}");
        checked += 1;
    }
    assert!(checked >= 15);
}

#[test]
fn well_separated_classes_are_recovered() {
    // Two groups of Trusts 2 apart, residual sd 0.3, 200 patients each.
    let mut rng = rng_from(3);
    let data = random_data(&mut rng, 10, 200, 200, 1, 2, 2.0, 0.0, 0.3);
    let fit = fit_grouped(&data, &spec(1, 2, 1), &EmConfig::default()).unwrap();
    let (lo, hi) = (fit.params.class_mean(0), fit.params.class_mean(1));
    assert!(((hi - lo) - 2.0).abs() < 0.02, "{lo} {hi}");
    assert!((fit.params.resid_variance - 0.09).abs() < 0.0009 * 2.0);
    for w in &fit.params.trust_class_weights {
        assert!((w - 0.5).abs() < 0.005);
    }
    for (j, row) in fit.trust_posteriors.iter().enumerate() {
        assert!(row[j % 2] > 1.0 - 1e-9);
    }
}

#[test]
fn two_patient_classes_improve_on_one() {
    let mut rng = rng_from(8);
    let data: GroupedData = random_data(&mut rng, 8, 40, 60, 1, 2, 1.0, 2.0, 0.3);
    let em = EmConfig { n_restarts: 6, ..EmConfig::default() };
    let one = fit_grouped(&data, &spec(1, 2, 1), &em).unwrap();
    let two = fit_grouped(&data, &spec(2, 2, 1), &em).unwrap();
    assert!(two.loglik > one.loglik + 10.0);
    for c in 0..2 {
        let rho = &two.params.patient_class_weights[c];
        assert!((rho.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let gap = (two.params.intercepts[c][0] - two.params.intercepts[c][1]).abs();
        assert!((gap - 2.0).abs() < 0.1, "{gap}");
    }
}

#[test]
fn restarts_are_reproducible_and_pick_the_best() {
    let mut rng = rng_from(21);
    let data = random_data(&mut rng, 12, 20, 40, 1, 3, 0.4, 0.0, 0.6);
    let em = EmConfig { n_restarts: 8, ..EmConfig::default() };
    let a = fit_grouped(&data, &spec(1, 3, 1), &em).unwrap();
    let b = fit_grouped(&data, &spec(1, 3, 1), &em).unwrap();
    assert_eq!(a, b);
    let single = |r: u64| {
        let mut g = rng_from(mlc_core::rng::derive_seed(em.seed, &[mlc_core::rng::tag::RESTART, r]));
        let init = initial_params(&data, &spec(1, 3, 1), em.init, &mut g).unwrap();
        run_chain(&data, &spec(1, 3, 1), init, &em).map(|c| c.estep.loglik).unwrap_or(f64::NEG_INFINITY)
    };
    let best = (0..8).map(single).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(a.loglik, best);
}

