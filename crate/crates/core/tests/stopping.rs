mod common;

use approx::assert_abs_diff_eq;
use causalot::causal::Coupling;
use causalot::pathspace::*;
use causalot::stopping::*;
use causalot::Error;
use rand::Rng;

#[test]
fn constant_and_time_payoffs() {
    let t = build_binomial(3, 1.0).unwrap();
    let f = natural_filtration(&t);
    let c = PayoffSpec::new(Payoff::Constant(0.7), 0.0);
    let sol = optimal_stopping(&t, &f, &c).unwrap();
    assert_eq!(sol.value, 0.7);
    assert!(sol.stop[0].iter().all(|&s| s));
    assert_abs_diff_eq!(rst_lp_value(&t, &f, &c).unwrap(), 0.7, epsilon = 1e-12);
    let time = PayoffSpec::builtin("time").unwrap();
    assert_eq!(optimal_stopping(&t, &f, &time).unwrap().value, 0.0);
}

#[test]
fn dp_matches_exhaustive_enumeration() {
    let t = build_binomial(3, 1.0).unwrap();
    let f = natural_filtration(&t);
    let g = enlarge_initial(&f, &AtomLabeling::sign_terminal(&t)).unwrap();
    for h in [&f, &g] {
        for name in ["neg_positive_part", "neg_running_max", "terminal_abs"] {
            let p = PayoffSpec::builtin(name).unwrap();
            let dp = optimal_stopping(&t, h, &p).unwrap();
            assert_abs_diff_eq!(dp.value, common::brute_force_stopping(&t, h, &p), epsilon = 1e-12);
            // The returned rule attains the value.
            let rule = RandStopTime::from_region(h, &dp.stop).unwrap();
            assert_abs_diff_eq!(rule.expected_payoff(&t, &p.tabulate(&t).unwrap()), dp.value, epsilon = 1e-12);
        }
    }
}

#[test]
fn more_information_never_hurts() {
    let mut rng = common::rng(61);
    for _ in 0..20 {
        let n = rng.gen_range(1..=4);
        let t = common::random_binomial(&mut rng, n, 0.2, 0.8);
        let f = natural_filtration(&t);
        let g = common::random_enlargement(&mut rng, &t);
        let p = common::random_payoff(&mut rng, &t, 1.0);
        let vf = optimal_stopping(&t, &f, &p).unwrap().value;
        let vg = optimal_stopping(&t, &g, &p).unwrap().value;
        assert!(vg <= vf + 1e-12);
    }
}

#[test]
fn every_rst_costs_at_least_the_lp_value() {
    let mut rng = common::rng(62);
    let t = common::random_binomial(&mut rng, 3, 0.2, 0.8);
    let g = common::random_enlargement(&mut rng, &t);
    let p = common::random_payoff(&mut rng, &t, 1.0);
    let lp = rst_lp_value(&t, &g, &p).unwrap();
    let table = p.tabulate(&t).unwrap();
    for _ in 0..50 {
        assert!(common::random_rst(&mut rng, &g).expected_payoff(&t, &table) >= lp - 1e-12);
    }
}

#[test]
fn projection_of_trivial_rsts() {
    let t = build_binomial(3, 1.0).unwrap();
    let f = natural_filtration(&t);
    let g = enlarge_initial(&f, &AtomLabeling::sign_terminal(&t)).unwrap();
    let prod = Coupling::product(&t, &t);
    for k0 in 0..=3 {
        let sigma = RandStopTime::deterministic(&g, k0).unwrap();
        let projected = project_rst(&t, &f, &t, &g, &prod, &sigma).unwrap();
        assert_eq!(projected, RandStopTime::deterministic(&f, k0).unwrap());
    }
    let mut rng = common::rng(63);
    let ident = Coupling::identity(&t, &t).unwrap();
    let sigma = common::random_rst(&mut rng, &f);
    let projected = project_rst(&t, &f, &t, &f, &ident, &sigma).unwrap();
    for k in 0..=3 {
        for l in 0..t.n_leaves() {
            assert_abs_diff_eq!(projected.sigma()[k][l], sigma.sigma()[k][l], epsilon = 1e-15);
        }
    }
    // A non-causal coupling is rejected.
    assert!(matches!(project_rst(&t, &f, &t, &g, &ident, &common::random_rst(&mut rng, &g)), Err(Error::NotCausal(_))));
}

#[test]
fn transfer_identity_against_direct_tower_computation() {
    let mut rng = common::rng(64);
    for _ in 0..20 {
        let n = rng.gen_range(1..=3);
        let t = common::random_binomial(&mut rng, n, 0.2, 0.8);
        let f = natural_filtration(&t);
        let g = common::random_enlargement(&mut rng, &t);
        let pi = common::random_causal_coupling(&mut rng, &t, &f, &t, &g);
        let sigma = common::random_rst(&mut rng, &g);
        let projected = project_rst(&t, &f, &t, &g, &pi, &sigma).unwrap();
        let payoff = common::random_payoff(&mut rng, &t, 1.0).tabulate(&t).unwrap();
        // Direct oracle: Σ_k Σ_{x,y} π(x, y)·ℓ_k(x)·ΔΣ_k(y).
        let mut direct = 0.0;
        for x in 0..t.n_leaves() {
            for y in 0..t.n_leaves() {
                for k in 0..=n {
                    let inc = sigma.sigma()[k][y] - if k == 0 { 0.0 } else { sigma.sigma()[k - 1][y] };
                    direct += pi.get(x, y) * payoff[k][x] * inc;
                }
            }
        }
        assert_abs_diff_eq!(projected.expected_payoff(&t, &payoff), direct, epsilon = 1e-12);
    }
}

#[test]
fn projection_identity_for_source_processes() {
    let mut rng = common::rng(65);
    let t = common::random_binomial(&mut rng, 3, 0.2, 0.8);
    let f = natural_filtration(&t);
    let g = common::random_enlargement(&mut rng, &t);
    let pi = common::random_causal_coupling(&mut rng, &t, &f, &t, &g);
    let n = t.n_leaves();
    let source = common::random_rst(&mut rng, &f);
    let lambda: Vec<Vec<f64>> = (0..=3).map(|k| (0..n * n).map(|i| source.sigma()[k][i / n]).collect()).collect();
    assert!(projection_identity_check(&t, &f, &pi, &lambda).unwrap() <= 1e-14);
    assert!(projection_identity_check(&t, &f, &pi, &lambda[..2]).is_err());
}

#[test]
fn information_bound_examples() {
    let t = build_binomial(4, 1.0).unwrap();
    let f = natural_filtration(&t);
    let p = PayoffSpec::builtin("neg_positive_part").unwrap();
    let same = value_of_info_stopping(&t, &f, &f, &p).unwrap();
    assert_abs_diff_eq!(same.gap, 0.0, epsilon = 1e-15);
    assert_abs_diff_eq!(same.transport, 0.0, epsilon = 1e-10);
    assert!(same.holds);

    let g = enlarge_initial(&f, &AtomLabeling::sign_terminal(&t)).unwrap();
    let r = value_of_info_stopping(&t, &f, &g, &p).unwrap();
    assert!(r.holds && r.gap >= 0.0 && r.gap <= r.bound + 1e-9);

    // Full information: the value is the mean pathwise minimum.
    let full = FiltrationSeq::full_information(&t);
    let table = p.tabulate(&t).unwrap();
    let pathwise = t.expect(|l| (0..=4).map(|k| table[k][l]).fold(f64::INFINITY, f64::min));
    let r = value_of_info_stopping(&t, &f, &full, &p).unwrap();
    assert_abs_diff_eq!(r.v_g, pathwise, epsilon = 1e-12);
    assert!(r.holds);
}

#[test]
fn lipschitz_violation_aborts_the_bound() {
    let t = build_binomial(3, 1.0).unwrap();
    let f = natural_filtration(&t);
    let p = PayoffSpec::new(Payoff::TerminalAbs, 0.5);
    assert!(matches!(value_of_info_stopping(&t, &f, &f, &p), Err(Error::Lipschitz { .. })));
}

#[test]
fn model_sensitivity_examples() {
    let mu = build_binomial(3, 1.0).unwrap();
    let nu = build_binomial_p(3, 1.0, 0.6).unwrap();
    let p = PayoffSpec::builtin("neg_running_max").unwrap();
    let same = model_sensitivity_stopping(&mu, &mu, &p).unwrap();
    assert_abs_diff_eq!(same.difference, 0.0, epsilon = 1e-15);
    assert_abs_diff_eq!(same.bicausal, 0.0, epsilon = 1e-10);
    let mut rng = common::rng(66);
    for _ in 0..20 {
        let k = rng.gen_range(0.5..2.0);
        let p = common::random_payoff(&mut rng, &mu, k);
        let ab = model_sensitivity_stopping(&mu, &nu, &p).unwrap();
        let ba = model_sensitivity_stopping(&nu, &mu, &p).unwrap();
        assert!(ab.holds && ba.holds);
        assert_abs_diff_eq!(ab.bicausal, ba.bicausal, epsilon = 1e-9);
    }
    let other = build_binomial(2, 1.0).unwrap();
    assert!(model_sensitivity_stopping(&mu, &other, &p).is_err());
}

#[test]
fn table_payoffs() {
    let t = build_binomial(1, 1.0).unwrap();
    let rows = vec![
        TableEntry { k: 0, path: vec![0.0], value: 0.2 },
        TableEntry { k: 1, path: vec![0.0, 1.0], value: -1.0 },
        TableEntry { k: 1, path: vec![0.0, -1.0], value: 1.0 },
    ];
    let p = PayoffSpec::new(Payoff::Table(rows.clone()), 1.0);
    let f = natural_filtration(&t);
    assert_abs_diff_eq!(optimal_stopping(&t, &f, &p).unwrap().value, 0.0, epsilon = 1e-15);
    let missing = PayoffSpec::new(Payoff::Table(rows[..2].to_vec()), 1.0);
    assert!(optimal_stopping(&t, &f, &missing).is_err());
}
