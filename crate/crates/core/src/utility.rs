//! Constrained log-utility maximisation on trees, with and without extra
//! information.
//!
//! One risky asset driven by the tree increments: over step k → k+1 a unit
//! of wealth invested returns `r = b_k·dt + σ·Δω_{k+1}`. The agent holds a
//! fraction λ ∈ [0, 1] of wealth in the asset. Log utility makes the problem
//! myopic, so the value is a sum of independent one-step maximisations.

use serde::{Deserialize, Serialize};

use crate::causal::{drift_field, solve_causal};
use crate::costs::{CostSpec, Rho};
use crate::enlargement::{drift_energy, kl_information, partition_entropy};
use crate::error::{invalid, Error, Result};
use crate::pathspace::{enlarge_initial, natural_filtration, AtomLabeling, FiltrationSeq, ScenarioTree};

/// Bracket width of the per-atom ternary search.
pub const SEARCH_TOL: f64 = 1e-10;
/// Slack allowed in the value-of-information inequalities.
pub const BOUND_SLACK: f64 = 1e-9;

/// Drift functional of the asset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Drift {
    /// b(k, ω) = b̄·clamp(ω_k, −1, 1), Lipschitz with constant |b̄|.
    Clamped { b_bar: f64 },
    Constant(f64),
}

impl Drift {
    pub fn eval(&self, tree: &ScenarioTree, k: usize, leaf: usize) -> f64 {
        match *self {
            Drift::Clamped { b_bar } => b_bar * tree.value(leaf, k).clamp(-1.0, 1.0),
            Drift::Constant(b) => b,
        }
    }

    /// Sup-norm Lipschitz constant L.
    pub fn lipschitz(&self) -> f64 {
        match *self {
            Drift::Clamped { b_bar } => b_bar.abs(),
            Drift::Constant(_) => 0.0,
        }
    }
}

/// Market JSON, `{"b_bar": .., "sigma": .., "s0": .., "T": ..}`; an optional
/// `"b"` selects a constant drift instead of the clamped one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarketConfig {
    #[serde(default)]
    pub b_bar: f64,
    #[serde(default)]
    pub b: Option<f64>,
    pub sigma: f64,
    #[serde(default = "one")]
    pub s0: f64,
    #[serde(rename = "T", default = "one")]
    pub horizon: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarketSpec {
    pub drift: Drift,
    /// Constant volatility; its modulus is the bound C.
    pub sigma: f64,
    pub s0: f64,
    pub horizon: f64,
    /// Lipschitz constant M of the volatility (0 for constant σ).
    pub sigma_lipschitz: f64,
    /// Constant C₁ of the volatility term; only matters when M > 0.
    pub c1: f64,
}

impl MarketSpec {
    pub fn new(drift: Drift, sigma: f64, s0: f64, horizon: f64) -> Result<Self> {
        if !(sigma.is_finite() && sigma > 0.0) {
            return invalid(format!("sigma must be positive, got {sigma}"));
        }
        if !(s0 > 0.0) || !(horizon > 0.0) {
            return invalid("s0 and T must be positive");
        }
        let b = match drift {
            Drift::Clamped { b_bar } => b_bar,
            Drift::Constant(b) => b,
        };
        if !b.is_finite() {
            return invalid("drift must be finite");
        }
        Ok(Self { drift, sigma, s0, horizon, sigma_lipschitz: 0.0, c1: 2.0 })
    }

    pub fn from_config(cfg: &MarketConfig) -> Result<Self> {
        let drift = match cfg.b {
            Some(b) => Drift::Constant(b),
            None => Drift::Clamped { b_bar: cfg.b_bar },
        };
        Self::new(drift, cfg.sigma, cfg.s0, cfg.horizon)
    }

    /// Bound C on |σ|.
    pub fn sigma_bound(&self) -> f64 {
        self.sigma.abs()
    }

    /// One-period return on `leaf` over step k → k+1.
    pub fn step_return(&self, tree: &ScenarioTree, k: usize, leaf: usize) -> f64 {
        self.drift.eval(tree, k, leaf) * tree.dt() + self.sigma * tree.incr(leaf, k + 1)
    }

    /// Wealth stays positive for every λ ∈ [0, 1] iff every return exceeds −1.
    pub fn check_wealth(&self, tree: &ScenarioTree) -> Result<()> {
        for k in 0..tree.steps() {
            for leaf in 0..tree.n_leaves() {
                let ret = self.step_return(tree, k, leaf);
                if !(1.0 + ret > 0.0) {
                    return Err(Error::WealthPositivity { node: tree.ancestor(leaf, k + 1), ret });
                }
            }
        }
        Ok(())
    }
}

/// Utility function; F = U∘exp must be concave, increasing and K-Lipschitz.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum UtilitySpec {
    #[default]
    Log,
}

impl UtilitySpec {
    /// Lipschitz constant K of U∘exp.
    pub fn lipschitz(&self) -> f64 {
        match self {
            UtilitySpec::Log => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UtilitySolution {
    pub value: f64,
    /// Optimal fraction `policy[k][atom of H_k]`, k = 0..N−1.
    pub policy: Vec<Vec<f64>>,
}

/// argmax over λ ∈ [0, 1] of Σ w_i ln(1 + λ r_i), with the maximum.
fn maximise_log(weights: &[f64], returns: &[f64]) -> (f64, f64) {
    let obj = |l: f64| weights.iter().zip(returns).map(|(w, r)| w * (l * r).ln_1p()).sum::<f64>();
    let slope = |l: f64| weights.iter().zip(returns).map(|(w, r)| w * r / (1.0 + l * r)).sum::<f64>();
    if slope(0.0) <= 0.0 {
        return (0.0, 0.0);
    }
    if slope(1.0) >= 0.0 {
        return (1.0, obj(1.0));
    }
    // Ternary search driven by the sign of the (decreasing) slope rather than
    // by objective comparisons, which lose resolution near the flat maximum.
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    while hi - lo > SEARCH_TOL {
        let m1 = lo + (hi - lo) / 3.0;
        let m2 = hi - (hi - lo) / 3.0;
        if slope(m1) <= 0.0 {
            hi = m1;
        } else if slope(m2) >= 0.0 {
            lo = m2;
        } else {
            (lo, hi) = (m1, m2);
        }
    }
    let l = 0.5 * (lo + hi);
    (l, obj(l))
}

/// Sum over steps and atoms h of H_k of ν(h)·max_λ E[ln(1 + λ r) | h].
pub fn log_utility_value(tree: &ScenarioTree, h: &FiltrationSeq, market: &MarketSpec) -> Result<UtilitySolution> {
    if h.steps() != tree.steps() || h.at(0).n_leaves() != tree.n_leaves() {
        return invalid("filtration does not match the tree");
    }
    market.check_wealth(tree)?;
    let nu = tree.leaf_prob();
    let mut value = 0.0;
    let mut policy = Vec::with_capacity(tree.steps());
    for k in 0..tree.steps() {
        let mut row = Vec::with_capacity(h.at(k).len());
        for atom in h.at(k).atoms() {
            let mass = tree.mass(atom);
            if mass <= 0.0 {
                row.push(0.0);
                continue;
            }
            let weights: Vec<f64> = atom.iter().map(|&l| nu[l] / mass).collect();
            let returns: Vec<f64> = atom.iter().map(|&l| market.step_return(tree, k, l)).collect();
            let (lambda, best) = maximise_log(&weights, &returns);
            row.push(lambda);
            value += mass * best;
        }
        policy.push(row);
    }
    Ok(UtilitySolution { value, policy })
}

/// K̃ = K(L·T·m + m²·d·C·M·T + C·m + C₁·M·√(T·d·m)) with m = d = 1.
pub fn info_bound_constant(market: &MarketSpec, utility: UtilitySpec, horizon: f64) -> f64 {
    let (m, d) = (1.0, 1.0);
    let (l, c, big_m) = (market.drift.lipschitz(), market.sigma_bound(), market.sigma_lipschitz);
    utility.lipschitz() * (l * horizon * m + m * m * d * c * big_m * horizon + c * m + market.c1 * big_m * (horizon * d * m).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UtilityInfoReport {
    pub v_f: f64,
    pub v_g: f64,
    /// v^G − v^F.
    pub gap: f64,
    /// Total-variation causal transport value from (tree, F) to (tree, G).
    pub transport: f64,
    pub k_tilde: f64,
    pub bound: f64,
    pub holds: bool,
}

/// 0 ≤ v^G − v^F ≤ K̃·inf_causal E^π[Σ|Δω̄ − Δω|].
pub fn value_of_info_utility(
    tree: &ScenarioTree,
    f: &FiltrationSeq,
    g: &FiltrationSeq,
    market: &MarketSpec,
    utility: UtilitySpec,
) -> Result<UtilityInfoReport> {
    let v_f = log_utility_value(tree, f, market)?.value;
    let v_g = log_utility_value(tree, g, market)?.value;
    let transport = solve_causal(tree, f, tree, g, &CostSpec::TotalVariation)?.value;
    let k_tilde = info_bound_constant(market, utility, tree.horizon());
    let gap = v_g - v_f;
    let bound = k_tilde * transport;
    Ok(UtilityInfoReport {
        v_f,
        v_g,
        gap,
        transport,
        k_tilde,
        bound,
        holds: gap >= -BOUND_SLACK && gap <= bound + BOUND_SLACK,
    })
}

/// Side-by-side report of the utility gain of an initial enlargement and
/// the information measures of the same enlargement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InfoComparison {
    pub steps: usize,
    pub utility_gap: f64,
    /// E[Σ α²/2·dt] of the discrete information drift.
    pub drift_energy: f64,
    pub kl_information: f64,
    pub entropy: f64,
    pub transport: f64,
    pub bound: f64,
}

pub fn info_value_vs_entropy(tree: &ScenarioTree, labels: &AtomLabeling, market: &MarketSpec) -> Result<InfoComparison> {
    let f = natural_filtration(tree);
    let g = enlarge_initial(&f, labels)?;
    let report = value_of_info_utility(tree, &f, &g, market, UtilitySpec::Log)?;
    let drift = drift_field(tree, &f, &g)?;
    Ok(InfoComparison {
        steps: tree.steps(),
        utility_gap: report.gap,
        drift_energy: drift_energy(&drift, Rho::Quadratic),
        kl_information: kl_information(tree, &f, &g)?,
        entropy: partition_entropy(labels),
        transport: report.transport,
        bound: report.bound,
    })
}
