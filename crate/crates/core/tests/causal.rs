mod common;

use approx::assert_abs_diff_eq;
use causalot::causal::*;
use causalot::costs::{cost_matrix, CostSpec, ExplicitMatrix, Rho};
use causalot::lp::Backend;
use causalot::pathspace::*;
use rand::Rng;

fn sign_setup(n: usize) -> (ScenarioTree, FiltrationSeq, FiltrationSeq) {
    let t = build_binomial(n, 1.0).unwrap();
    let f = natural_filtration(&t);
    let g = enlarge_initial(&f, &AtomLabeling::sign_terminal(&t)).unwrap();
    (t, f, g)
}

#[test]
fn constraint_counts() {
    let t1 = build_binomial(1, 1.0).unwrap();
    let f1 = natural_filtration(&t1);
    assert!(causality_constraints(&t1, &f1, &t1, &f1).unwrap().is_empty());
    let t2 = build_binomial(2, 1.0).unwrap();
    let f2 = natural_filtration(&t2);
    assert_eq!(causality_constraints(&t2, &f2, &t2, &f2).unwrap().len(), 4);
}

#[test]
fn product_and_identity_couplings_are_causal() {
    let (t, f, g) = sign_setup(3);
    let prod = Coupling::product(&t, &t);
    assert_eq!(check_causality(&prod, &t, &f, &t, &g).unwrap(), 0.0);
    let ident = Coupling::identity(&t, &t).unwrap();
    assert_eq!(check_causality(&ident, &t, &f, &t, &f).unwrap(), 0.0);
}

#[test]
fn anticipative_coupling_is_detected() {
    // The identity coupling into the sign enlargement reveals the terminal
    // sign of the source at time 0.
    let (t, f, g) = sign_setup(2);
    let ident = Coupling::identity(&t, &t).unwrap();
    assert!(check_causality(&ident, &t, &f, &t, &g).unwrap() > 1e-3);
    assert!(kernel_residual(&ident, &t, &f, &t, &g).unwrap() > 1e-3);
}

#[test]
fn marginal_mismatch_is_reported() {
    let t = build_binomial(1, 1.0).unwrap();
    let f = natural_filtration(&t);
    let pi = Coupling::new(&t, &t, vec![0.5, 0.0, 0.5, 0.0]).unwrap();
    assert!(matches!(check_causality(&pi, &t, &f, &t, &f), Err(causalot::Error::MarginalMismatch(_))));
}

#[test]
fn identical_trees_without_enlargement_cost_nothing() {
    let mut rng = common::rng(41);
    let t = common::random_binomial(&mut rng, 3, 0.2, 0.8);
    let f = natural_filtration(&t);
    let sol = solve_causal(&t, &f, &t, &f, &CostSpec::TotalVariation).unwrap();
    assert_abs_diff_eq!(sol.value, 0.0, epsilon = 1e-10);
    let bi = solve_bicausal(&t, &f, &t, &f, &CostSpec::TotalVariation).unwrap();
    assert_abs_diff_eq!(bi.value, 0.0, epsilon = 1e-10);
}

#[test]
fn one_step_causal_equals_brute_force_ot() {
    let mut rng = common::rng(42);
    for _ in 0..20 {
        let tx = common::random_binomial(&mut rng, 1, 0.1, 0.9);
        let ty = common::random_binomial(&mut rng, 1, 0.1, 0.9);
        let (mu, nu) = (tx.leaf_prob(), ty.leaf_prob());
        let c = common::random_cost_matrix(&mut rng, 2, 2);
        // Couplings of 2-point marginals: one parameter a = π(0, 0) on an interval.
        let (lo, hi) = ((mu[0] + nu[0] - 1.0).max(0.0), mu[0].min(nu[0]));
        let cost_at = |a: f64| {
            a * c.get(0, 0) + (mu[0] - a) * c.get(0, 1) + (nu[0] - a) * c.get(1, 0) + (1.0 - mu[0] - nu[0] + a) * c.get(1, 1)
        };
        let brute = cost_at(lo).min(cost_at(hi));
        let sol = solve_causal(&tx, &natural_filtration(&tx), &ty, &natural_filtration(&ty), &CostSpec::Explicit(c))
            .unwrap();
        assert_abs_diff_eq!(sol.value, brute, epsilon = 1e-10);
    }
}

#[test]
fn sign_enlargement_sandwich_at_n4() {
    let (t, f, g) = sign_setup(4);
    let cost = CostSpec::CameronMartin(Rho::Quadratic);
    let sol = solve_causal(&t, &f, &t, &g, &cost).unwrap();
    let refined = refined_dual_value(&drift_field(&t, &f, &g).unwrap(), Rho::Quadratic).value;
    let product = product_coupling_cost(&t, &t, &cost).unwrap();
    assert!(refined <= sol.value && sol.value <= product);
    assert_abs_diff_eq!(sol.value, common::binomial_cm_closed_form(&t, &g), epsilon = 1e-9);
    assert!(sol.coupling.causality_residual.unwrap() < 1e-9);
}

#[test]
fn closed_form_matches_lp_and_bounds_refined_dual() {
    for n in 2..=10 {
        let (t, f, g) = sign_setup(n);
        let closed = common::binomial_cm_closed_form(&t, &g);
        if n <= 5 {
            let lp = solve_causal(&t, &f, &t, &g, &CostSpec::CameronMartin(Rho::Quadratic)).unwrap().value;
            assert_abs_diff_eq!(lp, closed, epsilon = 1e-9);
        }
        let refined = refined_dual_value(&drift_field(&t, &f, &g).unwrap(), Rho::Quadratic).value;
        assert!(refined <= closed, "N={n}: refined {refined} > primal {closed}");
    }
}

#[test]
fn bicausal_dominates_causal_and_matches_nested_dp() {
    let mut rng = common::rng(43);
    for _ in 0..6 {
        let tx = common::random_binomial(&mut rng, 3, 0.2, 0.8);
        let ty = common::random_binomial(&mut rng, 3, 0.2, 0.8);
        let (fx, fy) = (natural_filtration(&tx), natural_filtration(&ty));
        let cost = CostSpec::CameronMartin(Rho::Quadratic);
        let causal = solve_causal(&tx, &fx, &ty, &fy, &cost).unwrap().value;
        let bi = solve_bicausal(&tx, &fx, &ty, &fy, &cost).unwrap();
        assert!(bi.value >= causal - 1e-10);
        let dp = nested_dp(&tx, &ty, &*separable_step_cost(&tx, &ty, &cost).unwrap()).unwrap();
        assert_abs_diff_eq!(bi.value, dp, epsilon = 1e-8);
        let classical = solve_classical(&tx, &ty, &cost).unwrap().value;
        assert!(classical <= causal + 1e-10);
    }
}

#[test]
fn nested_dp_trivial_cases() {
    let mut rng = common::rng(44);
    let tx = common::random_binomial(&mut rng, 2, 0.2, 0.8);
    let ty = common::random_binomial(&mut rng, 2, 0.2, 0.8);
    assert_eq!(nested_dp(&tx, &ty, &|_, _, _| 0.0).unwrap(), 0.0);
    // One step: classical transport between the child laws.
    let (ox, oy) = (common::random_binomial(&mut rng, 1, 0.2, 0.8), common::random_binomial(&mut rng, 1, 0.2, 0.8));
    let step = separable_step_cost(&ox, &oy, &CostSpec::TotalVariation).unwrap();
    let c: Vec<Vec<f64>> =
        (0..2).map(|i| (0..2).map(|j| step(1, ox.leaf_nodes()[i], oy.leaf_nodes()[j])).collect()).collect();
    assert_abs_diff_eq!(
        nested_dp(&ox, &oy, &*step).unwrap(),
        small_ot(ox.leaf_prob(), oy.leaf_prob(), &c),
        epsilon = 1e-12
    );
    assert!(separable_step_cost(&ox, &oy, &CostSpec::SupMetric).is_err());
}

#[test]
fn dual_certificates() {
    let (t, f, g) = sign_setup(3);
    let zero = CostSpec::Explicit(ExplicitMatrix::new(8, 8, vec![0.0; 64]).unwrap());
    let sol = solve_causal(&t, &f, &t, &g, &zero).unwrap();
    let cert = lp_dual_certificate(&sol).unwrap();
    assert!(cert.psi.iter().all(|p| p.abs() < 1e-9));

    let mut rng = common::rng(45);
    for _ in 0..10 {
        let n = rng.gen_range(1..=3);
        let tx = common::random_binomial(&mut rng, n, 0.2, 0.8);
        let ty = common::random_binomial(&mut rng, n, 0.2, 0.8);
        let fx = natural_filtration(&tx);
        let gy = common::random_enlargement(&mut rng, &ty);
        let cost = CostSpec::Explicit(common::random_cost_matrix(&mut rng, tx.n_leaves(), ty.n_leaves()));
        let sol = solve_causal(&tx, &fx, &ty, &gy, &cost).unwrap();
        let cert = lp_dual_certificate(&sol).unwrap();
        assert!(cert.inequality_residual <= 1e-8 && cert.value_residual <= 1e-8 && cert.h_mean <= 1e-8);
        // E^π[h] = 0 for every causal π, not only the optimal one.
        let other = common::random_causal_coupling(&mut rng, &tx, &fx, &ty, &gy);
        let mean: f64 = other.as_slice().iter().zip(&cert.h).map(|(p, h)| p * h).sum();
        assert!(mean.abs() < 1e-8, "E[h] = {mean}");
    }
}

#[test]
fn classical_one_step_certificate_gives_kantorovich_value() {
    let mut rng = common::rng(46);
    let tx = common::random_binomial(&mut rng, 1, 0.2, 0.8);
    let ty = common::random_binomial(&mut rng, 1, 0.2, 0.8);
    let c = common::random_cost_matrix(&mut rng, 2, 2);
    let sol = solve_classical(&tx, &ty, &CostSpec::Explicit(c.clone())).unwrap();
    let cert = lp_dual_certificate(&sol).unwrap();
    // Brute-force dual: max φ·μ + ψ·ν over φ(x) + ψ(y) ≤ c(x, y); with two
    // points per side it is attained with φ(0) = 0 on a finite candidate set.
    let (mu, nu) = (tx.leaf_prob(), ty.leaf_prob());
    let mut best = f64::NEG_INFINITY;
    for &p1 in &[c.get(1, 0) - c.get(0, 0), c.get(1, 1) - c.get(0, 1)] {
        let psi0 = c.get(0, 0).min(c.get(1, 0) - p1);
        let psi1 = c.get(0, 1).min(c.get(1, 1) - p1);
        best = best.max(mu[1] * p1 + nu[0] * psi0 + nu[1] * psi1);
    }
    assert_abs_diff_eq!(sol.value, best, epsilon = 1e-10);
    let dual: f64 = cert.psi.iter().zip(nu).map(|(p, n)| p * n).sum();
    assert_abs_diff_eq!(dual, best, epsilon = 1e-10);
}

#[test]
fn drift_fields() {
    let t = build_binomial(4, 1.0).unwrap();
    let f = natural_filtration(&t);
    let d = drift_field(&t, &f, &f).unwrap();
    assert!(d.alpha.iter().flatten().all(|&a| a.abs() < 1e-15));
    assert_eq!(refined_dual_value(&d, Rho::Quadratic).value, 0.0);

    let (t2, f2, g2) = sign_setup(2);
    let d2 = drift_field(&t2, &f2, &g2).unwrap();
    // On {ω_2 ≥ 0} = {uu, ud, du}: E[Δω_1] = (h + h − h)/3 with h = 1/√2, dt = ½.
    let h = 0.5f64.sqrt();
    let plus = g2.at(0).atom_of((0..4).find(|&l| t2.value(l, 2) > 0.0).unwrap());
    assert_abs_diff_eq!(d2.alpha[0][plus], (h / 3.0) / 0.5, epsilon = 1e-14);

    let refined = refined_dual_value(&d2, Rho::Quadratic);
    let direct: f64 = d2
        .alpha
        .iter()
        .zip(&d2.mass)
        .flat_map(|(a, m)| a.iter().zip(m).map(|(a, m)| 0.5 * m * a * a * d2.dt))
        .sum();
    assert_abs_diff_eq!(refined.value, direct, epsilon = 1e-15);
    assert_eq!(refined.fhat, d2.alpha);
    assert!(refined.fenchel_young_residual < 1e-12);
}

#[test]
fn sparse_and_dense_backends_agree() {
    let (t, f, g) = sign_setup(4);
    let cost = CostSpec::CameronMartin(Rho::Quadratic);
    let dense = solve_transport(&t, &f, &t, &g, &cost, Mode::Causal, SolveOptions { backend: Backend::Dense }).unwrap();
    let sparse = solve_transport(&t, &f, &t, &g, &cost, Mode::Causal, SolveOptions { backend: Backend::Sparse }).unwrap();
    assert_abs_diff_eq!(dense.value, sparse.value, epsilon = 1e-8);
    assert!(sparse.lp.used_sparse && sparse.lp.duals.is_none());
    assert!(lp_dual_certificate(&sparse).is_err());
    let c = cost_matrix(&t, &t, &cost).unwrap();
    assert_abs_diff_eq!(sparse.coupling.expect(&c), sparse.value, epsilon = 1e-8);
}
