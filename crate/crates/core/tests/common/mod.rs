//! Shared generators and independent oracles for the integration tests.
#![allow(dead_code)]

use causalot::causal::{solve_classical, solve_transport, Coupling, Mode, SolveOptions};
use causalot::costs::{CostSpec, ExplicitMatrix};
use causalot::lp::Backend;
use causalot::pathspace::{
    build_binomial, enlarge_initial, enlarge_progressive, last_zero_time, natural_filtration, AtomLabeling,
    FiltrationSeq, ScenarioTree,
};
use causalot::stopping::{Payoff, PayoffSpec, RandStopTime};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Binomial skeleton with an independent up-probability in [lo, hi] at
/// every internal node.
pub fn random_binomial(rng: &mut impl Rng, n: usize, lo: f64, hi: f64) -> ScenarioTree {
    let base = build_binomial(n, 1.0).unwrap();
    let up: Vec<f64> = (0..base.nodes().len()).map(|_| rng.gen_range(lo..=hi)).collect();
    base.reweighted(|node| {
        let p = up[node.parent.expect("edges have parents")];
        if node.incr > 0.0 {
            p
        } else {
            1.0 - p
        }
    })
    .unwrap()
}

pub fn random_labels(rng: &mut impl Rng, tree: &ScenarioTree, classes: u32) -> AtomLabeling {
    let labels: Vec<u32> = (0..tree.n_leaves()).map(|_| rng.gen_range(0..classes)).collect();
    AtomLabeling::new(tree, &labels).unwrap()
}

/// A random enlargement of the natural filtration: sign, terminal value,
/// random labels or the last-zero progressive enlargement.
pub fn random_enlargement(rng: &mut impl Rng, tree: &ScenarioTree) -> FiltrationSeq {
    let f = natural_filtration(tree);
    match rng.gen_range(0..4) {
        0 => enlarge_initial(&f, &AtomLabeling::sign_terminal(tree)).unwrap(),
        1 => enlarge_initial(&f, &AtomLabeling::terminal_value(tree).unwrap()).unwrap(),
        2 => {
            let classes = rng.gen_range(2..=4);
            enlarge_initial(&f, &random_labels(rng, tree, classes)).unwrap()
        }
        _ => enlarge_progressive(&f, &last_zero_time(tree)).unwrap(),
    }
}

pub fn random_cost_matrix(rng: &mut impl Rng, nx: usize, ny: usize) -> ExplicitMatrix {
    ExplicitMatrix::new(nx, ny, (0..nx * ny).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
}

/// A random causal coupling: a random convex combination of optimal causal
/// couplings for random costs and the product coupling.
pub fn random_causal_coupling(
    rng: &mut impl Rng,
    tx: &ScenarioTree,
    f: &FiltrationSeq,
    ty: &ScenarioTree,
    g: &FiltrationSeq,
) -> Coupling {
    let mut mix = vec![0.0; tx.n_leaves() * ty.n_leaves()];
    let mut weights: Vec<f64> = (0..3).map(|_| rng.gen_range(0.05..1.0)).collect();
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    for (i, w) in weights.iter().enumerate() {
        let part = if i == 0 {
            Coupling::product(tx, ty)
        } else {
            let cost = CostSpec::Explicit(random_cost_matrix(rng, tx.n_leaves(), ty.n_leaves()));
            let opts = SolveOptions { backend: Backend::Dense };
            solve_transport(tx, f, ty, g, &cost, Mode::Causal, opts).unwrap().coupling
        };
        mix.iter_mut().zip(part.as_slice()).for_each(|(m, p)| *m += w * p);
    }
    Coupling::new(tx, ty, mix).unwrap()
}

/// A random coupling with the right marginals that is typically not causal.
pub fn random_classical_coupling(rng: &mut impl Rng, tx: &ScenarioTree, ty: &ScenarioTree) -> Coupling {
    let cost = CostSpec::Explicit(random_cost_matrix(rng, tx.n_leaves(), ty.n_leaves()));
    let vertex = solve_classical(tx, ty, &cost).unwrap().coupling;
    let w = rng.gen_range(0.3..1.0);
    let prod = Coupling::product(tx, ty);
    let mix = vertex.as_slice().iter().zip(prod.as_slice()).map(|(a, b)| w * a + (1.0 - w) * b).collect();
    Coupling::new(tx, ty, mix).unwrap()
}

/// A random randomised stopping time adapted to `h`: on each atom the
/// remaining mass is stopped at a uniform random fraction.
pub fn random_rst(rng: &mut impl Rng, h: &FiltrationSeq) -> RandStopTime {
    let n = h.steps();
    let leaves = h.at(0).n_leaves();
    let mut sigma = vec![vec![0.0; leaves]; n + 1];
    for k in 0..=n {
        for atom in h.at(k).atoms() {
            let prev = if k == 0 { 0.0 } else { sigma[k - 1][atom[0]] };
            let v = if k == n { 1.0 } else { prev + rng.gen_range(0.0..1.0) * (1.0 - prev) };
            for &l in atom {
                sigma[k][l] = v;
            }
        }
    }
    RandStopTime::new(h, sigma).unwrap()
}

/// A random payoff ℓ(k, ω) = Σ_{j ≤ k} w_{kj} ω_j + c_k with Σ_j |w_{kj}| ≤ K,
/// hence K-Lipschitz for the uniform distance.
pub fn random_payoff(rng: &mut impl Rng, tree: &ScenarioTree, lipschitz: f64) -> PayoffSpec {
    let n = tree.steps();
    let mut weights = Vec::with_capacity(n + 1);
    let mut consts = Vec::with_capacity(n + 1);
    for k in 0..=n {
        let raw: Vec<f64> = (0..=k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm: f64 = raw.iter().map(|w: &f64| w.abs()).sum::<f64>().max(1e-12);
        let scale = lipschitz * rng.gen_range(0.0..=1.0) / norm;
        weights.push(raw.into_iter().map(|w| w * scale).collect::<Vec<f64>>());
        consts.push(rng.gen_range(-0.5..0.5));
    }
    let mut by_node = vec![0.0; tree.nodes().len()];
    for leaf in 0..tree.n_leaves() {
        for k in 0..=n {
            let v: f64 = (0..=k).map(|j| weights[k][j] * tree.value(leaf, j)).sum::<f64>() + consts[k];
            by_node[tree.ancestor(leaf, k)] = v;
        }
    }
    PayoffSpec::new(Payoff::ByNode(by_node), lipschitz)
}

/// Causal Cameron–Martin value (quadratic ρ) of the initial enlargement of
/// a symmetric binomial tree: 2·Σ_k Σ_{g ∈ G_k} ν(g)·|p_k(g) − ½|, with
/// p_k(g) the conditional probability of an up-move.
pub fn binomial_cm_closed_form(tree: &ScenarioTree, g: &FiltrationSeq) -> f64 {
    let mut total = 0.0;
    for k in 0..tree.steps() {
        for atom in g.at(k).atoms() {
            let m = tree.mass(atom);
            let up: f64 = atom.iter().filter(|&&l| tree.incr(l, k + 1) > 0.0).map(|&l| tree.leaf_prob()[l]).sum();
            total += 2.0 * m * (up / m - 0.5).abs();
        }
    }
    total
}

/// Brute-force E[Δω_{k+1} | leaf's atom of G_k] / dt.
pub fn brute_drift(tree: &ScenarioTree, g: &FiltrationSeq, k: usize, leaf: usize) -> f64 {
    let atom = &g.at(k).atoms()[g.at(k).atom_of(leaf)];
    let m: f64 = atom.iter().map(|&l| tree.leaf_prob()[l]).sum();
    atom.iter().map(|&l| tree.leaf_prob()[l] * tree.incr(l, k + 1)).sum::<f64>() / m / tree.dt()
}

/// Every pure stopping rule adapted to `h`, enumerated exhaustively, and
/// the smallest expected payoff among them.
pub fn brute_force_stopping(tree: &ScenarioTree, h: &FiltrationSeq, payoff: &PayoffSpec) -> f64 {
    let table = payoff.tabulate(tree).unwrap();
    // State: for each leaf the step at which it has stopped (None = running).
    fn rec(
        k: usize,
        tree: &ScenarioTree,
        h: &FiltrationSeq,
        table: &[Vec<f64>],
        stopped: &mut Vec<Option<usize>>,
        best: &mut f64,
    ) {
        let n = tree.steps();
        if k == n {
            let v = tree.expect(|l| table[stopped[l].unwrap_or(n)][l]);
            *best = best.min(v);
            return;
        }
        let running: Vec<usize> =
            (0..h.at(k).len()).filter(|&a| h.at(k).atoms()[a].iter().any(|&l| stopped[l].is_none())).collect();
        for mask in 0u64..(1u64 << running.len()) {
            let mut changed = Vec::new();
            for (bit, &a) in running.iter().enumerate() {
                if mask >> bit & 1 == 1 {
                    for &l in &h.at(k).atoms()[a] {
                        if stopped[l].is_none() {
                            stopped[l] = Some(k);
                            changed.push(l);
                        }
                    }
                }
            }
            rec(k + 1, tree, h, table, stopped, best);
            for l in changed {
                stopped[l] = None;
            }
        }
    }
    let mut best = f64::INFINITY;
    rec(0, tree, h, &table, &mut vec![None; tree.n_leaves()], &mut best);
    best
}

/// One-step log-utility argmax of p·ln(1 + λu) + (1 − p)·ln(1 + λd) on
/// [0, 1], by calculus. The derivative at 0 is the mean return; with returns
/// of opposite signs the stationary point is λ* = −(p·u + (1 − p)·d)/(u·d).
pub fn one_step_log_argmax(p: f64, u: f64, d: f64) -> f64 {
    if p * u + (1.0 - p) * d <= 0.0 {
        0.0
    } else if u.min(d) >= 0.0 {
        1.0
    } else {
        (-(p * u + (1.0 - p) * d) / (u * d)).clamp(0.0, 1.0)
    }
}
