//! Optimal stopping on trees under general filtrations.
//!
//! Minimisation convention throughout: a stopping rule pays `ℓ(k, ω)` when
//! it stops at step k. Randomised stopping times are cumulative stopping
//! masses `Σ[k][leaf]`; stopping mass may sit at k = 0 (ΔΣ_0 = Σ_0).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::causal::{constraint_residual, solve_bicausal, solve_causal, Coupling};
use crate::costs::{sup_metric, CostSpec};
use crate::error::{invalid, Error, Result};
use crate::lp::{self, Backend, LpProblem, LpStatus};
use crate::pathspace::{natural_filtration, FiltrationSeq, ScenarioTree};

/// Tolerance used when validating randomised stopping times.
pub const RST_TOL: f64 = 1e-9;
/// Slack allowed in the value-of-information inequalities.
pub const BOUND_SLACK: f64 = 1e-9;
/// Number of random leaf pairs used by the Lipschitz spot-check.
pub const LIPSCHITZ_SAMPLES: usize = 1000;

/// One row of a tabulated payoff: the value at step `k` on histories whose
/// values ω_0 … ω_k match `path`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableEntry {
    pub k: usize,
    pub path: Vec<f64>,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payoff {
    /// −(ω_k)⁺.
    NegPositivePart,
    /// −max_{j ≤ k} ω_j.
    NegRunningMax,
    /// |ω_k|.
    TerminalAbs,
    /// k·dt.
    Time,
    Constant(f64),
    /// Value per tree node (the node fixes both k and the history).
    ByNode(Vec<f64>),
    Table(Vec<TableEntry>),
}

/// An F-optional payoff with its declared Lipschitz constant w.r.t. the
/// uniform distance of paths.
#[derive(Debug, Clone, PartialEq)]
pub struct PayoffSpec {
    pub payoff: Payoff,
    pub lipschitz: f64,
}

impl PayoffSpec {
    pub fn new(payoff: Payoff, lipschitz: f64) -> Self {
        Self { payoff, lipschitz }
    }

    /// Builtin payoffs by name, with their natural Lipschitz constants.
    pub fn builtin(name: &str) -> Result<Self> {
        match name {
            "neg_running_max" => Ok(Self::new(Payoff::NegRunningMax, 1.0)),
            "terminal_abs" => Ok(Self::new(Payoff::TerminalAbs, 1.0)),
            "neg_positive_part" => Ok(Self::new(Payoff::NegPositivePart, 1.0)),
            "time" => Ok(Self::new(Payoff::Time, 0.0)),
            other => invalid(format!("unknown builtin payoff '{other}'")),
        }
    }

    /// Payoff at step `k` on the path of `leaf`.
    pub fn eval(&self, tree: &ScenarioTree, k: usize, leaf: usize) -> Result<f64> {
        Ok(match &self.payoff {
            Payoff::NegPositivePart => -tree.value(leaf, k).max(0.0),
            Payoff::NegRunningMax => -(0..=k).map(|j| tree.value(leaf, j)).fold(f64::NEG_INFINITY, f64::max),
            Payoff::TerminalAbs => tree.value(leaf, k).abs(),
            Payoff::Time => k as f64 * tree.dt(),
            Payoff::Constant(c) => *c,
            Payoff::ByNode(v) => {
                let node = tree.ancestor(leaf, k);
                *v.get(node).ok_or_else(|| Error::Invalid(format!("payoff table has no node {node}")))?
            }
            Payoff::Table(rows) => {
                let prefix: Vec<f64> = (0..=k).map(|j| tree.value(leaf, j)).collect();
                rows.iter()
                    .find(|r| {
                        r.k == k
                            && r.path.len() == prefix.len()
                            && r.path.iter().zip(&prefix).all(|(a, b)| (a - b).abs() <= 1e-9)
                    })
                    .map(|r| r.value)
                    .ok_or_else(|| Error::Invalid(format!("payoff table has no entry for step {k}, leaf {leaf}")))?
            }
        })
    }

    /// `ℓ[k][leaf]` for the whole tree.
    pub fn tabulate(&self, tree: &ScenarioTree) -> Result<Vec<Vec<f64>>> {
        (0..=tree.steps())
            .map(|k| (0..tree.n_leaves()).map(|l| self.eval(tree, k, l)).collect())
            .collect()
    }

    /// Spot-checks |ℓ(k, x) − ℓ(k, x')| ≤ K·‖x − x'‖_∞ on random leaf pairs
    /// and steps (exhaustively when there are few of them).
    pub fn check_lipschitz(&self, tree: &ScenarioTree, seed: u64) -> Result<()> {
        let table = self.tabulate(tree)?;
        let n = tree.n_leaves();
        let paths: Vec<Vec<f64>> = (0..n).map(|l| tree.path(l)).collect();
        let check = |k: usize, a: usize, b: usize| -> Result<()> {
            let diff = (table[k][a] - table[k][b]).abs();
            let bound = self.lipschitz * sup_metric(&paths[a], &paths[b])?;
            if diff > bound + 1e-12 {
                return Err(Error::Lipschitz { diff, bound });
            }
            Ok(())
        };
        let combos = n * n * (tree.steps() + 1);
        if combos <= LIPSCHITZ_SAMPLES {
            for k in 0..=tree.steps() {
                for a in 0..n {
                    for b in 0..n {
                        check(k, a, b)?;
                    }
                }
            }
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..LIPSCHITZ_SAMPLES {
                check(rng.gen_range(0..=tree.steps()), rng.gen_range(0..n), rng.gen_range(0..n))?;
            }
        }
        Ok(())
    }
}

/// Randomised stopping time: adapted, nondecreasing, terminal-one.
#[derive(Debug, Clone, PartialEq)]
pub struct RandStopTime {
    sigma: Vec<Vec<f64>>,
}

impl RandStopTime {
    /// Validates `sigma[k][leaf]` against the filtration `h`.
    pub fn new(h: &FiltrationSeq, sigma: Vec<Vec<f64>>) -> Result<Self> {
        let n = h.steps();
        if sigma.len() != n + 1 {
            return Err(Error::LengthMismatch(sigma.len(), n + 1));
        }
        let leaves = h.at(0).n_leaves();
        for (k, row) in sigma.iter().enumerate() {
            if row.len() != leaves {
                return Err(Error::LengthMismatch(row.len(), leaves));
            }
            for (l, &v) in row.iter().enumerate() {
                if !(-RST_TOL..=1.0 + RST_TOL).contains(&v) {
                    return invalid(format!("Σ[{k}][{l}] = {v} outside [0, 1]"));
                }
                if k > 0 && v < sigma[k - 1][l] - RST_TOL {
                    return invalid(format!("Σ decreases at step {k} on leaf {l}"));
                }
            }
            for atom in h.at(k).atoms() {
                let v0 = row[atom[0]];
                if atom.iter().any(|&l| (row[l] - v0).abs() > RST_TOL) {
                    return invalid(format!("Σ[{k}] is not constant on an atom of the filtration"));
                }
            }
        }
        if let Some(l) = sigma[n].iter().position(|&v| (v - 1.0).abs() > RST_TOL) {
            return invalid(format!("Σ[N] = {} ≠ 1 on leaf {l}", sigma[n][l]));
        }
        Ok(Self { sigma })
    }

    /// The deterministic time k₀.
    pub fn deterministic(h: &FiltrationSeq, k0: usize) -> Result<Self> {
        let leaves = h.at(0).n_leaves();
        let sigma = (0..=h.steps()).map(|k| vec![if k >= k0 { 1.0 } else { 0.0 }; leaves]).collect();
        Self::new(h, sigma)
    }

    /// Pure stopping rule from a stopping region `stop[k][atom of H_k]`.
    pub fn from_region(h: &FiltrationSeq, stop: &[Vec<bool>]) -> Result<Self> {
        let leaves = h.at(0).n_leaves();
        let mut sigma = vec![vec![0.0; leaves]; h.steps() + 1];
        for l in 0..leaves {
            let first = (0..h.steps()).find(|&k| stop[k][h.at(k).atom_of(l)]).unwrap_or(h.steps());
            for row in sigma.iter_mut().skip(first) {
                row[l] = 1.0;
            }
        }
        Self::new(h, sigma)
    }

    pub fn sigma(&self) -> &[Vec<f64>] {
        &self.sigma
    }

    pub fn steps(&self) -> usize {
        self.sigma.len() - 1
    }

    /// ΔΣ_k on `leaf` (ΔΣ_0 = Σ_0).
    pub fn increment(&self, k: usize, leaf: usize) -> f64 {
        if k == 0 {
            self.sigma[0][leaf]
        } else {
            self.sigma[k][leaf] - self.sigma[k - 1][leaf]
        }
    }

    /// E[Σ_k ℓ_k ΔΣ_k] under the tree measure, for a tabulated payoff.
    pub fn expected_payoff(&self, tree: &ScenarioTree, payoff: &[Vec<f64>]) -> f64 {
        tree.expect(|l| (0..=self.steps()).map(|k| payoff[k][l] * self.increment(k, l)).sum())
    }
}

/// Outcome of the backward induction.
#[derive(Debug, Clone, PartialEq)]
pub struct StoppingSolution {
    pub value: f64,
    /// `stop[k][atom]`: stop at step k on that atom of H_k (ties stop).
    pub stop: Vec<Vec<bool>>,
    /// Snell envelope `values[k][atom]`.
    pub values: Vec<Vec<f64>>,
}

fn payoff_on_atoms(tree: &ScenarioTree, h: &FiltrationSeq, payoff: &PayoffSpec) -> Result<Vec<Vec<f64>>> {
    if !h.contains(&natural_filtration(tree)) {
        return invalid("stopping filtration must contain the natural filtration");
    }
    (0..=tree.steps())
        .map(|k| h.at(k).atoms().iter().map(|a| payoff.eval(tree, k, a[0])).collect())
        .collect()
}

/// Backward induction V_N = ℓ_N, V_k = min(ℓ_k, E[V_{k+1} | H_k]).
pub fn optimal_stopping(tree: &ScenarioTree, h: &FiltrationSeq, payoff: &PayoffSpec) -> Result<StoppingSolution> {
    let ell = payoff_on_atoms(tree, h, payoff)?;
    let n = tree.steps();
    let mut values = vec![Vec::new(); n + 1];
    let mut stop = vec![Vec::new(); n + 1];
    values[n] = ell[n].clone();
    stop[n] = vec![true; ell[n].len()];
    for k in (0..n).rev() {
        let (hk, hk1) = (h.at(k), h.at(k + 1));
        let kids = hk.children_in(hk1);
        let mut vk = Vec::with_capacity(hk.len());
        let mut sk = Vec::with_capacity(hk.len());
        for (a, atom) in hk.atoms().iter().enumerate() {
            let m = tree.mass(atom);
            let cont: f64 = kids[a].iter().map(|&b| tree.mass(&hk1.atoms()[b]) * values[k + 1][b]).sum::<f64>() / m;
            let s = ell[k][a] <= cont;
            sk.push(s);
            vk.push(if s { ell[k][a] } else { cont });
        }
        values[k] = vk;
        stop[k] = sk;
    }
    let value = h.at(0).atoms().iter().zip(&values[0]).map(|(a, v)| tree.mass(a) * v).sum();
    Ok(StoppingSolution { value, stop, values })
}

/// Value of the stopping problem over randomised stopping times, as an LP
/// in the increments ΔΣ_k(h) ≥ 0 with Σ_k ΔΣ_k = 1 on every leaf.
pub fn rst_lp_value(tree: &ScenarioTree, h: &FiltrationSeq, payoff: &PayoffSpec) -> Result<f64> {
    let ell = payoff_on_atoms(tree, h, payoff)?;
    let mut offset = Vec::with_capacity(tree.steps() + 2);
    offset.push(0);
    for k in 0..=tree.steps() {
        offset.push(offset[k] + h.at(k).len());
    }
    let mut cost = Vec::with_capacity(offset[tree.steps() + 1]);
    for k in 0..=tree.steps() {
        for (a, atom) in h.at(k).atoms().iter().enumerate() {
            cost.push(tree.mass(atom) * ell[k][a]);
        }
    }
    let mut p = LpProblem::new(cost);
    for l in 0..tree.n_leaves() {
        p.add_row((0..=tree.steps()).map(|k| (offset[k] + h.at(k).atom_of(l), 1.0)).collect(), 1.0);
    }
    let sol = lp::solve(&p, Backend::Dense)?;
    if sol.status != LpStatus::Optimal {
        return Err(Error::LpStatus(sol.status.name()));
    }
    Ok(sol.value)
}

/// Projects a G-adapted randomised stopping time of the target through a
/// causal coupling onto the source filtration:
/// `Σ̃_k(a) = Σ_{j ≤ k} E^π[ΔΣ_j | F_j](a)`.
pub fn project_rst(
    tx: &ScenarioTree,
    f: &FiltrationSeq,
    ty: &ScenarioTree,
    g: &FiltrationSeq,
    pi: &Coupling,
    sigma: &RandStopTime,
) -> Result<RandStopTime> {
    let r = constraint_residual(pi, tx, f, ty, g)?;
    if r > 1e-8 {
        return Err(Error::NotCausal(r));
    }
    let (nx, ny) = (tx.n_leaves(), ty.n_leaves());
    let mu = tx.leaf_prob();
    let mut out = vec![vec![0.0; nx]; tx.steps() + 1];
    let mut running = vec![0.0; nx];
    for (j, row) in out.iter_mut().enumerate() {
        let inc: Vec<f64> = (0..ny).map(|y| sigma.increment(j, y)).collect();
        let per_leaf: Vec<f64> = (0..nx).map(|x| (0..ny).map(|y| pi.get(x, y) * inc[y]).sum()).collect();
        for atom in f.at(j).atoms() {
            let m: f64 = atom.iter().map(|&x| mu[x]).sum();
            let cond = atom.iter().map(|&x| per_leaf[x]).sum::<f64>() / m;
            for &x in atom {
                running[x] += cond;
            }
        }
        row.copy_from_slice(&running);
    }
    RandStopTime::new(f, out)
}

/// Both sides of the transfer identity
/// `E^μ[Σ_k ℓ_k ΔΣ̃_k] = E^π[Σ_k ℓ_k(x) ΔΣ_k(y)]` for a source payoff table.
pub fn transfer_sides(
    tx: &ScenarioTree,
    pi: &Coupling,
    sigma: &RandStopTime,
    projected: &RandStopTime,
    payoff: &[Vec<f64>],
) -> (f64, f64) {
    let lhs = projected.expected_payoff(tx, payoff);
    let mut rhs = 0.0;
    for x in 0..pi.nx() {
        for y in 0..pi.ny() {
            let p = pi.get(x, y);
            if p != 0.0 {
                rhs += p * (0..=sigma.steps()).map(|k| payoff[k][x] * sigma.increment(k, y)).sum::<f64>();
            }
        }
    }
    (lhs, rhs)
}

/// Largest gap between the optional projection
/// `E^π[Λ_k | F_k] − E^π[Λ_0 | F_0]` and the dual optional projection
/// `Σ_{j=1..k} E^π[ΔΛ_j | F_j]` of a process `lambda[k][x·ny + y]` on the
/// product, over steps and source atoms of positive mass.
pub fn projection_identity_check(
    tx: &ScenarioTree,
    f: &FiltrationSeq,
    pi: &Coupling,
    lambda: &[Vec<f64>],
) -> Result<f64> {
    let (nx, ny) = (pi.nx(), pi.ny());
    if lambda.len() != tx.steps() + 1 || lambda.iter().any(|l| l.len() != nx * ny) {
        return invalid("process must have one value per step and leaf pair");
    }
    // cond(k, j, values) = E^π[values | F_j] evaluated per source leaf.
    let cond = |j: usize, values: &dyn Fn(usize, usize) -> f64| -> Vec<f64> {
        let mut out = vec![0.0; nx];
        for atom in f.at(j).atoms() {
            let (mut num, mut den) = (0.0, 0.0);
            for &x in atom {
                for y in 0..ny {
                    let p = pi.get(x, y);
                    num += p * values(x, y);
                    den += p;
                }
            }
            let v = if den > 0.0 { num / den } else { 0.0 };
            for &x in atom {
                out[x] = v;
            }
        }
        out
    };
    let base = cond(0, &|x, y| lambda[0][x * ny + y]);
    let mut dual = vec![0.0; nx];
    let mut worst = 0.0f64;
    for k in 0..=tx.steps() {
        if k > 0 {
            let inc = cond(k, &|x, y| lambda[k][x * ny + y] - lambda[k - 1][x * ny + y]);
            dual.iter_mut().zip(&inc).for_each(|(d, i)| *d += i);
        }
        let optional = cond(k, &|x, y| lambda[k][x * ny + y]);
        for atom in f.at(k).atoms() {
            if tx.mass(atom) <= 0.0 {
                continue;
            }
            let x = atom[0];
            worst = worst.max((optional[x] - base[x] - dual[x]).abs());
        }
    }
    Ok(worst)
}

/// Value-of-information report for stopping.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StoppingInfoReport {
    pub v_f: f64,
    pub v_g: f64,
    /// v^F − v^G.
    pub gap: f64,
    /// inf over causal π of E^π[‖ω − ω̄‖_∞].
    pub transport: f64,
    pub lipschitz: f64,
    /// K·transport.
    pub bound: f64,
    /// Largest causality residual of the optimal coupling.
    pub causality_residual: f64,
    pub holds: bool,
}

/// Compares stopping with the information G against F on the same tree:
/// 0 ≤ v^F − v^G ≤ K·inf_causal E^π[d] (the sign is asserted only when G
/// refines F).
pub fn value_of_info_stopping(
    tree: &ScenarioTree,
    f: &FiltrationSeq,
    g: &FiltrationSeq,
    payoff: &PayoffSpec,
) -> Result<StoppingInfoReport> {
    payoff.check_lipschitz(tree, 0)?;
    let v_f = optimal_stopping(tree, f, payoff)?.value;
    let v_g = optimal_stopping(tree, g, payoff)?.value;
    let sol = solve_causal(tree, f, tree, g, &CostSpec::SupMetric)?;
    let gap = v_f - v_g;
    let bound = payoff.lipschitz * sol.value;
    let sign_ok = !g.contains(f) || gap >= -BOUND_SLACK;
    Ok(StoppingInfoReport {
        v_f,
        v_g,
        gap,
        transport: sol.value,
        lipschitz: payoff.lipschitz,
        bound,
        causality_residual: sol.coupling.causality_residual.unwrap_or(0.0),
        holds: sign_ok && gap <= bound + BOUND_SLACK,
    })
}

/// Model-sensitivity report for stopping under two measures.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub v_mu: f64,
    pub v_nu: f64,
    pub difference: f64,
    /// inf over bicausal π of E^π[‖ω − ω̄‖_∞].
    pub bicausal: f64,
    pub lipschitz: f64,
    pub bound: f64,
    pub holds: bool,
}

/// |v^{F,μ} − v^{F,ν}| ≤ K·inf_bicausal E^π[d] for two measures on the same
/// tree skeleton, both with their natural filtrations.
pub fn model_sensitivity_stopping(
    tree_mu: &ScenarioTree,
    tree_nu: &ScenarioTree,
    payoff: &PayoffSpec,
) -> Result<SensitivityReport> {
    let same_paths = tree_mu.n_leaves() == tree_nu.n_leaves()
        && tree_mu.steps() == tree_nu.steps()
        && (0..tree_mu.n_leaves()).all(|l| {
            tree_mu.path(l).iter().zip(tree_nu.path(l)).all(|(a, b)| (a - b).abs() <= 1e-12)
        });
    if !same_paths {
        return invalid("model sensitivity needs two measures on the same tree skeleton");
    }
    payoff.check_lipschitz(tree_mu, 0)?;
    let (f_mu, f_nu) = (natural_filtration(tree_mu), natural_filtration(tree_nu));
    let v_mu = optimal_stopping(tree_mu, &f_mu, payoff)?.value;
    let v_nu = optimal_stopping(tree_nu, &f_nu, payoff)?.value;
    let sol = solve_bicausal(tree_mu, &f_mu, tree_nu, &f_nu, &CostSpec::SupMetric)?;
    let difference = (v_mu - v_nu).abs();
    let bound = payoff.lipschitz * sol.value;
    Ok(SensitivityReport {
        v_mu,
        v_nu,
        difference,
        bicausal: sol.value,
        lipschitz: payoff.lipschitz,
        bound,
        holds: difference <= bound + BOUND_SLACK,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pathspace::build_binomial;

    #[test]
    fn builtins_evaluate() {
        let t = build_binomial(2, 1.0).unwrap();
        let h = 0.5f64.sqrt();
        let p = PayoffSpec::builtin("neg_running_max").unwrap();
        // Leaf 1 is up-then-down: running max h at k = 2.
        assert!((p.eval(&t, 2, 1).unwrap() + h).abs() < 1e-15);
        let p = PayoffSpec::builtin("terminal_abs").unwrap();
        assert!((p.eval(&t, 2, 3).unwrap() - 2.0 * h).abs() < 1e-15);
        assert!(PayoffSpec::builtin("nope").is_err());
    }

    #[test]
    fn lipschitz_check_rejects_wrong_constant() {
        let t = build_binomial(3, 1.0).unwrap();
        assert!(PayoffSpec::new(Payoff::TerminalAbs, 1.0).check_lipschitz(&t, 1).is_ok());
        assert!(PayoffSpec::new(Payoff::TerminalAbs, 0.4).check_lipschitz(&t, 1).is_err());
    }

    #[test]
    fn rst_validation() {
        let t = build_binomial(2, 1.0).unwrap();
        let f = natural_filtration(&t);
        assert!(RandStopTime::deterministic(&f, 1).is_ok());
        // Not adapted: differs within the trivial atom at k = 0.
        let bad = vec![vec![0.5, 0.0, 0.0, 0.0], vec![1.0; 4], vec![1.0; 4]];
        assert!(RandStopTime::new(&f, bad).is_err());
        let not_terminal = vec![vec![0.0; 4], vec![0.0; 4], vec![0.5; 4]];
        assert!(RandStopTime::new(&f, not_terminal).is_err());
    }
}
