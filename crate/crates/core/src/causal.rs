//! Causal, bicausal and classical transport between scenario trees.
//!
//! A coupling π of (X, F, μ) and (Y, G, ν) is causal when, for every step
//! k and every `G_k` atom A, the kernel mass `π^x(A) = π(x, A)/μ(x)` only
//! depends on the `F_k` atom of x. The constraint generator below emits the
//! representative-pairing form of this condition; the LP itself is
//! assembled from an equivalent one-step family, which is much sparser:
//!
//! ```text
//! π(a', A) − μ(a'|a)·π(a, A) = 0     a ∈ F_k, a' ∈ F_{k+1}, a' ⊂ a, A ∈ G_k
//! ```
//!
//! Chaining these rows down to the singletons of F_N recovers the kernel
//! condition. When F_0 is trivial, the k = 0 rows together with the source
//! marginals are replaced by `π(x, A₀) = μ(x)·ν(A₀)` for every `G_0` atom
//! A₀, which splits the LP into independent blocks.

use serde::{Deserialize, Serialize};

use crate::costs::{cost_matrix, CostSpec, ExplicitMatrix, Rho};
use crate::error::{invalid, Error, Result};
use crate::lp::{self, Backend, LpProblem, LpSolution, LpStatus};
use crate::pathspace::{FiltrationSeq, Partition, ScenarioTree};

/// Atoms lighter than this are ignored by the causality constraints.
pub const MASS_TOL: f64 = 1e-14;
/// Marginal residual above which a coupling is rejected.
pub const MARGINAL_TOL: f64 = 1e-7;
/// Tolerance of the dual-certificate verification.
pub const CERT_TOL: f64 = 1e-8;

/// Dense joint measure on (source leaf, target leaf), row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Coupling {
    nx: usize,
    ny: usize,
    pi: Vec<f64>,
    /// Max absolute deviation of the row/column sums from μ and ν.
    pub marginal_residual: f64,
    /// Max causality violation, when evaluated.
    pub causality_residual: Option<f64>,
}

impl Coupling {
    pub fn new(tx: &ScenarioTree, ty: &ScenarioTree, pi: Vec<f64>) -> Result<Self> {
        let (nx, ny) = (tx.n_leaves(), ty.n_leaves());
        if pi.len() != nx * ny {
            return Err(Error::LengthMismatch(pi.len(), nx * ny));
        }
        if let Some(v) = pi.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return invalid(format!("coupling entry {v} is not a nonnegative number"));
        }
        let mut c = Self { nx, ny, pi, marginal_residual: 0.0, causality_residual: None };
        c.marginal_residual = c.marginal_error(tx.leaf_prob(), ty.leaf_prob());
        Ok(c)
    }

    /// The independent coupling μ ⊗ ν.
    pub fn product(tx: &ScenarioTree, ty: &ScenarioTree) -> Self {
        let pi = tx.leaf_prob().iter().flat_map(|&a| ty.leaf_prob().iter().map(move |&b| a * b)).collect();
        Self::new(tx, ty, pi).expect("product coupling is valid")
    }

    /// Identity coupling between two trees with the same leaf measure.
    pub fn identity(tx: &ScenarioTree, ty: &ScenarioTree) -> Result<Self> {
        let n = tx.n_leaves();
        if ty.n_leaves() != n {
            return Err(Error::LengthMismatch(n, ty.n_leaves()));
        }
        let mut pi = vec![0.0; n * n];
        for (i, &p) in tx.leaf_prob().iter().enumerate() {
            pi[i * n + i] = p;
        }
        Self::new(tx, ty, pi)
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pi[x * self.ny + y]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.pi
    }

    /// Swapped coupling, a measure on (target leaf, source leaf).
    pub fn transpose(&self) -> Coupling {
        let mut pi = vec![0.0; self.pi.len()];
        for x in 0..self.nx {
            for y in 0..self.ny {
                pi[y * self.nx + x] = self.get(x, y);
            }
        }
        Coupling { nx: self.ny, ny: self.nx, pi, marginal_residual: self.marginal_residual, causality_residual: None }
    }

    /// Nonzero entries as (source leaf, target leaf, mass).
    pub fn sparse_triples(&self, threshold: f64) -> Vec<(usize, usize, f64)> {
        (0..self.nx)
            .flat_map(|x| (0..self.ny).map(move |y| (x, y)))
            .filter_map(|(x, y)| {
                let v = self.get(x, y);
                (v > threshold).then_some((x, y, v))
            })
            .collect()
    }

    /// E^π[c].
    pub fn expect(&self, cost: &ExplicitMatrix) -> f64 {
        self.pi.iter().zip(cost.data()).map(|(p, c)| p * c).sum()
    }

    fn marginal_error(&self, mu: &[f64], nu: &[f64]) -> f64 {
        let mut col = vec![0.0; self.ny];
        let mut err = 0.0f64;
        for x in 0..self.nx {
            let row = &self.pi[x * self.ny..(x + 1) * self.ny];
            err = err.max((row.iter().sum::<f64>() - mu[x]).abs());
            for (c, v) in col.iter_mut().zip(row) {
                *c += v;
            }
        }
        col.iter().zip(nu).fold(err, |e, (c, n)| e.max((c - n).abs()))
    }

    /// `π(x, A)` for every source leaf and every atom of `part` (row-major).
    fn atom_masses(&self, part: &Partition) -> Vec<f64> {
        let na = part.len();
        let mut out = vec![0.0; self.nx * na];
        for x in 0..self.nx {
            let row = &self.pi[x * self.ny..(x + 1) * self.ny];
            for (y, v) in row.iter().enumerate() {
                out[x * na + part.atom_of(y)] += v;
            }
        }
        out
    }
}

/// One representative-pairing causality constraint
/// `μ(x₀)·π(x, A) − μ(x)·π(x₀, A) = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CausalityConstraint {
    pub k: usize,
    /// Index of A among the atoms of G_k.
    pub target_atom: usize,
    /// Representative leaf x₀ of the F_k atom.
    pub representative: usize,
    pub leaf: usize,
}

fn check_trees(tx: &ScenarioTree, f: &FiltrationSeq, ty: &ScenarioTree, g: &FiltrationSeq) -> Result<()> {
    if tx.steps() != ty.steps() {
        return invalid(format!("trees have {} and {} steps", tx.steps(), ty.steps()));
    }
    if f.steps() != tx.steps() || f.at(0).n_leaves() != tx.n_leaves() {
        return invalid("source filtration does not match the source tree");
    }
    if g.steps() != ty.steps() || g.at(0).n_leaves() != ty.n_leaves() {
        return invalid("target filtration does not match the target tree");
    }
    Ok(())
}

/// Representative-pairing causality constraints for couplings of
/// (X, F, μ) and (Y, G, ν). Steps whose `G_k` is trivial are skipped (the
/// marginals imply them), as are target atoms of negligible mass.
pub fn causality_constraints(
    tx: &ScenarioTree,
    f: &FiltrationSeq,
    ty: &ScenarioTree,
    g: &FiltrationSeq,
) -> Result<Vec<CausalityConstraint>> {
    check_trees(tx, f, ty, g)?;
    let mu = tx.leaf_prob();
    let mut out = Vec::new();
    for k in 0..tx.steps() {
        let gk = g.at(k);
        if gk.len() < 2 {
            continue;
        }
        for (ai, atom) in gk.atoms().iter().enumerate() {
            if ty.mass(atom) < MASS_TOL {
                continue;
            }
            for a in f.at(k).atoms() {
                let live: Vec<usize> = a.iter().copied().filter(|&x| mu[x] > MASS_TOL).collect();
                if live.len() < 2 {
                    continue;
                }
                for &x in &live[1..] {
                    out.push(CausalityConstraint { k, target_atom: ai, representative: live[0], leaf: x });
                }
            }
        }
    }
    Ok(out)
}

/// Largest violation of the representative-pairing constraints, each
/// normalised by the mass of its F_k atom. Ignores marginals.
pub fn constraint_residual(
    pi: &Coupling,
    tx: &ScenarioTree,
    f: &FiltrationSeq,
    ty: &ScenarioTree,
    g: &FiltrationSeq,
) -> Result<f64> {
    check_trees(tx, f, ty, g)?;
    let mu = tx.leaf_prob();
    let mut worst = 0.0f64;
    for k in 0..tx.steps() {
        let gk = g.at(k);
        if gk.len() < 2 {
            continue;
        }
        let na = gk.len();
        let masses = pi.atom_masses(gk);
        let heavy: Vec<bool> = gk.atoms().iter().map(|a| ty.mass(a) >= MASS_TOL).collect();
        for a in f.at(k).atoms() {
            let live: Vec<usize> = a.iter().copied().filter(|&x| mu[x] > MASS_TOL).collect();
            if live.len() < 2 {
                continue;
            }
            let ma = tx.mass(a);
            let x0 = live[0];
            for &x in &live[1..] {
                for ai in (0..na).filter(|&i| heavy[i]) {
                    let r = (mu[x0] * masses[x * na + ai] - mu[x] * masses[x0 * na + ai]).abs() / ma;
                    worst = worst.max(r);
                }
            }
        }
    }
    Ok(worst)
}

/// Kernel-measurability check by direct enumeration: the largest spread of
/// `π^x(A)` over the leaves x of any F_k atom, for every k < N and every
/// G_k atom A (trivial steps included).
pub fn kernel_residual(
    pi: &Coupling,
    tx: &ScenarioTree,
    f: &FiltrationSeq,
    ty: &ScenarioTree,
    g: &FiltrationSeq,
) -> Result<f64> {
    check_trees(tx, f, ty, g)?;
    let mu = tx.leaf_prob();
    let mut worst = 0.0f64;
    for k in 0..tx.steps() {
        let gk = g.at(k);
        for a_target in gk.atoms() {
            for a in f.at(k).atoms() {
                let kernels: Vec<f64> = a
                    .iter()
                    .filter(|&&x| mu[x] > MASS_TOL)
                    .map(|&x| a_target.iter().map(|&y| pi.get(x, y)).sum::<f64>() / mu[x])
                    .collect();
                for (i, u) in kernels.iter().enumerate() {
                    for v in &kernels[i + 1..] {
                        worst = worst.max((u - v).abs());
                    }
                }
            }
        }
    }
    Ok(worst)
}

/// Causality residual of a coupling with matching marginals.
pub fn check_causality(
    pi: &Coupling,
    tx: &ScenarioTree,
    f: &FiltrationSeq,
    ty: &ScenarioTree,
    g: &FiltrationSeq,
) -> Result<f64> {
    let err = pi.marginal_error(tx.leaf_prob(), ty.leaf_prob());
    if err > MARGINAL_TOL {
        return Err(Error::MarginalMismatch(err));
    }
    constraint_residual(pi, tx, f, ty, g)
}

/// Which family of couplings a transport problem ranges over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Classical,
    Causal,
    Bicausal,
}

/// Role of an LP row, used to regroup duals into a certificate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowKind {
    /// Σ_x π(x, y) = ν(y).
    Target(usize),
    /// Σ_y π(x, y) = μ(x).
    Source(usize),
    /// Σ_{y ∈ A₀} π(x, y) = μ(x)·ν(A₀), A₀ an atom of G_0.
    SourceBlock { x: usize, atom: usize },
    /// One-step forward causality row (right-hand side 0).
    Forward,
    /// One-step reverse causality row (right-hand side 0).
    Reverse,
}

/// Options for [`solve_transport`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SolveOptions {
    pub backend: Backend,
}

/// Result of a transport solve.
#[derive(Debug, Clone)]
pub struct TransportSolution {
    pub mode: Mode,
    pub value: f64,
    pub coupling: Coupling,
    pub lp: LpSolution,
    pub problem: LpProblem,
    pub kinds: Vec<RowKind>,
    pub cost: ExplicitMatrix,
    /// Target measure ν and the G_0 partition used by block rows.
    nu: Vec<f64>,
    g0: Partition,
}

/// One-step rows `π(a', A) − (m(a')/m(a))·π(a, A) = 0` for a filtration
/// `outer` on the "kernel" side and `inner` on the conditioned side.
/// `var(o, i)` maps (outer leaf, inner leaf) to the LP variable.
fn one_step_rows(
    outer: &FiltrationSeq,
    outer_mass: &[f64],
    inner: &FiltrationSeq,
    k_start: usize,
    var: &dyn Fn(usize, usize) -> usize,
) -> Vec<Vec<(usize, f64)>> {
    let mut rows = Vec::new();
    let n = outer.steps();
    for k in k_start..n {
        let (pk, pk1) = (outer.at(k), outer.at(k + 1));
        let children = pk.children_in(pk1);
        let ik = inner.at(k);
        for (ai, a) in pk.atoms().iter().enumerate() {
            let kids = &children[ai];
            let ma: f64 = a.iter().map(|&l| outer_mass[l]).sum();
            if kids.len() < 2 || ma < MASS_TOL {
                continue;
            }
            for &child in &kids[..kids.len() - 1] {
                let a_child = &pk1.atoms()[child];
                let ratio = a_child.iter().map(|&l| outer_mass[l]).sum::<f64>() / ma;
                let in_child: std::collections::HashSet<usize> = a_child.iter().copied().collect();
                for big_a in &ik.atoms()[..ik.len() - 1] {
                    let mut row = Vec::with_capacity(a.len() * big_a.len());
                    for &o in a {
                        let coef = if in_child.contains(&o) { 1.0 - ratio } else { -ratio };
                        for &i in big_a {
                            row.push((var(o, i), coef));
                        }
                    }
                    rows.push(row);
                }
            }
        }
    }
    rows
}

/// Builds the transport LP over all leaf pairs (variable `x·ny + y`).
pub fn assemble(
    tx: &ScenarioTree,
    f: &FiltrationSeq,
    ty: &ScenarioTree,
    g: &FiltrationSeq,
    cost: &ExplicitMatrix,
    mode: Mode,
) -> Result<(LpProblem, Vec<RowKind>)> {
    check_trees(tx, f, ty, g)?;
    let (nx, ny) = (tx.n_leaves(), ty.n_leaves());
    if cost.rows() != nx || cost.cols() != ny {
        return invalid("cost matrix does not match the trees");
    }
    let (mu, nu) = (tx.leaf_prob(), ty.leaf_prob());
    let mut p = LpProblem::new(cost.data().to_vec());
    let mut kinds = Vec::new();

    for y in 0..ny {
        p.add_row((0..nx).map(|x| (x * ny + y, 1.0)).collect(), nu[y]);
        kinds.push(RowKind::Target(y));
    }
    let split = mode != Mode::Classical && f.at(0).len() == 1;
    if split {
        let g0 = g.at(0);
        for x in 0..nx {
            for (ai, atom) in g0.atoms().iter().enumerate() {
                let rhs = mu[x] * ty.mass(atom);
                p.add_row(atom.iter().map(|&y| (x * ny + y, 1.0)).collect(), rhs);
                kinds.push(RowKind::SourceBlock { x, atom: ai });
            }
        }
    } else {
        for x in 0..nx {
            p.add_row((0..ny).map(|y| (x * ny + y, 1.0)).collect(), mu[x]);
            kinds.push(RowKind::Source(x));
        }
    }
    if mode != Mode::Classical {
        let k_start = usize::from(split);
        let var = |x: usize, y: usize| x * ny + y;
        for row in one_step_rows(f, mu, g, k_start, &var) {
            p.add_row(row, 0.0);
            kinds.push(RowKind::Forward);
        }
    }
    if mode == Mode::Bicausal {
        let var = |y: usize, x: usize| x * ny + y;
        for row in one_step_rows(g, nu, f, 0, &var) {
            p.add_row(row, 0.0);
            kinds.push(RowKind::Reverse);
        }
    }
    Ok((p, kinds))
}

/// Solves the transport problem of the given mode.
pub fn solve_transport(
    tx: &ScenarioTree,
    f: &FiltrationSeq,
    ty: &ScenarioTree,
    g: &FiltrationSeq,
    cost: &CostSpec,
    mode: Mode,
    opts: SolveOptions,
) -> Result<TransportSolution> {
    check_trees(tx, f, ty, g)?;
    let cmat = cost_matrix(tx, ty, cost)?;
    let (problem, kinds) = assemble(tx, f, ty, g, &cmat, mode)?;

    // A point mass on either side admits exactly one coupling.
    let lp = if tx.n_leaves() == 1 || ty.n_leaves() == 1 {
        let x = Coupling::product(tx, ty).pi;
        let value = problem.cost().iter().zip(&x).map(|(c, v)| c * v).sum();
        lp::solve(&problem, Backend::Dense).unwrap_or(LpSolution {
            status: LpStatus::Optimal,
            value,
            dual_value: f64::NAN,
            x,
            duals: None,
            iterations: 0,
            used_sparse: false,
        })
    } else {
        lp::solve(&problem, opts.backend)?
    };
    if lp.status != LpStatus::Optimal {
        return Err(Error::LpStatus(lp.status.name()));
    }
    let mut coupling = Coupling::new(tx, ty, lp.x.iter().map(|v| v.max(0.0)).collect())?;
    if mode != Mode::Classical {
        let mut r = constraint_residual(&coupling, tx, f, ty, g)?;
        if mode == Mode::Bicausal {
            r = r.max(constraint_residual(&coupling.transpose(), ty, g, tx, f)?);
        }
        coupling.causality_residual = Some(r);
    }
    Ok(TransportSolution {
        mode,
        value: lp.value,
        coupling,
        lp,
        problem,
        kinds,
        cost: cmat,
        nu: ty.leaf_prob().to_vec(),
        g0: g.at(0).clone(),
    })
}

pub fn solve_causal(
    tx: &ScenarioTree,
    f: &FiltrationSeq,
    ty: &ScenarioTree,
    g: &FiltrationSeq,
    cost: &CostSpec,
) -> Result<TransportSolution> {
    solve_transport(tx, f, ty, g, cost, Mode::Causal, SolveOptions::default())
}

pub fn solve_bicausal(
    tx: &ScenarioTree,
    f: &FiltrationSeq,
    ty: &ScenarioTree,
    g: &FiltrationSeq,
    cost: &CostSpec,
) -> Result<TransportSolution> {
    solve_transport(tx, f, ty, g, cost, Mode::Bicausal, SolveOptions::default())
}

pub fn solve_classical(tx: &ScenarioTree, ty: &ScenarioTree, cost: &CostSpec) -> Result<TransportSolution> {
    let (f, g) = (crate::pathspace::natural_filtration(tx), crate::pathspace::natural_filtration(ty));
    solve_transport(tx, &f, ty, &g, cost, Mode::Classical, SolveOptions::default())
}

/// E^{μ⊗ν}[c], the cost of the independent coupling.
pub fn product_coupling_cost(tx: &ScenarioTree, ty: &ScenarioTree, cost: &CostSpec) -> Result<f64> {
    let c = cost_matrix(tx, ty, cost)?;
    Ok(Coupling::product(tx, ty).expect(&c))
}

/// Dual certificate of a transport solve: `ψ(y) ≤ c(x, y) + h(x, y)` with
/// `h` in the span of the causality test functions, and `Σ ν ψ = value`.
#[derive(Debug, Clone)]
pub struct DualCertificate {
    pub psi: Vec<f64>,
    /// `h(x, y)`, row-major over (source leaf, target leaf).
    pub h: Vec<f64>,
    /// Dual multipliers of the causality rows (forward then reverse).
    pub causal_multipliers: Vec<f64>,
    /// max over pairs of `ψ(y) − c(x, y) − h(x, y)` (≤ 0 up to rounding).
    pub inequality_residual: f64,
    /// |Σ ν ψ − primal value|.
    pub value_residual: f64,
    /// |E^π[h]| under the optimal coupling (zero for causal π).
    pub h_mean: f64,
}

/// Regroups the LP duals into a certificate and verifies it.
///
/// Each non-target row r with multiplier λ_r, rhs b_r and coefficient
/// function a_r contributes `−λ_r·(a_r(x, y) − b_r·s_r(y))` to h and
/// `λ_r·b_r·s_r(y)` to ψ, where `s_r` is a ν-density (≡ 1 for source rows,
/// `1_{A₀}/ν(A₀)` for block rows). Then `ψ − h = Σ_r λ_r a_r ≤ c` is exactly
/// dual feasibility, and `E^π[h] = 0` for every coupling with the right
/// target marginal satisfying the rows.
pub fn lp_dual_certificate(sol: &TransportSolution) -> Result<DualCertificate> {
    if sol.lp.status != LpStatus::Optimal {
        return Err(Error::LpStatus(sol.lp.status.name()));
    }
    let y = sol
        .lp
        .duals
        .as_ref()
        .ok_or_else(|| Error::Unsupported("the selected LP backend does not report duals".into()))?;
    let (nx, ny) = (sol.cost.rows(), sol.cost.cols());
    let mut psi = vec![0.0; ny];
    let mut h = vec![0.0; nx * ny];
    let mut causal_multipliers = Vec::new();
    let g0_mass: Vec<f64> = sol.g0.atoms().iter().map(|a| a.iter().map(|&l| sol.nu[l]).sum()).collect();
    for (r, kind) in sol.kinds.iter().enumerate() {
        let lam = y[r];
        match *kind {
            RowKind::Target(t) => psi[t] += lam,
            RowKind::Source(x) => {
                let b = sol.problem.rhs()[r];
                for v in psi.iter_mut() {
                    *v += lam * b;
                }
                for t in 0..ny {
                    h[x * ny + t] -= lam;
                }
                for hv in h.iter_mut() {
                    *hv += lam * b;
                }
            }
            RowKind::SourceBlock { x, atom } => {
                let b = sol.problem.rhs()[r];
                let s = 1.0 / g0_mass[atom];
                for &t in &sol.g0.atoms()[atom] {
                    psi[t] += lam * b * s;
                    h[x * ny + t] -= lam;
                    for xx in 0..nx {
                        h[xx * ny + t] += lam * b * s;
                    }
                }
            }
            RowKind::Forward | RowKind::Reverse => {
                causal_multipliers.push(lam);
                if lam != 0.0 {
                    for &(j, a) in sol.problem.row(r) {
                        h[j] -= lam * a;
                    }
                }
            }
        }
    }
    let mut inequality_residual = f64::NEG_INFINITY;
    for x in 0..nx {
        for t in 0..ny {
            let v = psi[t] - sol.cost.get(x, t) - h[x * ny + t];
            inequality_residual = inequality_residual.max(v);
        }
    }
    let dual: f64 = psi.iter().zip(&sol.nu).map(|(p, n)| p * n).sum();
    let value_residual = (dual - sol.value).abs();
    let h_mean = sol.coupling.as_slice().iter().zip(&h).map(|(p, v)| p * v).sum::<f64>().abs();
    let cert = DualCertificate { psi, h, causal_multipliers, inequality_residual, value_residual, h_mean };
    let scale = 1.0 + sol.value.abs();
    if cert.inequality_residual > CERT_TOL * scale || cert.value_residual > CERT_TOL * scale {
        return Err(Error::Consistency(format!(
            "dual certificate failed: inequality residual {:e}, value residual {:e}",
            cert.inequality_residual, cert.value_residual
        )));
    }
    Ok(cert)
}

/// Per-step cost `c_k(node_x, node_y)` of a separable path cost, evaluated
/// on the depth-k nodes reached at step k ≥ 1.
pub type StepCost<'a> = dyn Fn(usize, usize, usize) -> f64 + 'a;

/// Step cost of a separable [`CostSpec`].
pub fn separable_step_cost<'a>(
    tx: &'a ScenarioTree,
    ty: &'a ScenarioTree,
    spec: &CostSpec,
) -> Result<Box<StepCost<'a>>> {
    let (nx, ny) = (tx.nodes(), ty.nodes());
    match spec {
        CostSpec::TotalVariation => Ok(Box::new(move |_, u, v| (ny[v].incr - nx[u].incr).abs())),
        CostSpec::CameronMartin(rho) => {
            let (rho, dt) = (*rho, tx.dt());
            Ok(Box::new(move |_, u, v| rho.eval((ny[v].incr - nx[u].incr) / dt) * dt))
        }
        CostSpec::SupMetric | CostSpec::Explicit(_) => {
            Err(Error::Unsupported("nested recursion needs a cost separable across steps".into()))
        }
    }
}

/// Bicausal value by backward recursion over node pairs: at each pair of
/// depth-k nodes, a classical transport between the child distributions
/// with cost `c_{k+1} + V_{k+1}`.
pub fn nested_dp(tx: &ScenarioTree, ty: &ScenarioTree, step_cost: &StepCost<'_>) -> Result<f64> {
    if tx.steps() != ty.steps() {
        return invalid("nested recursion needs trees with the same number of steps");
    }
    let (nx, ny) = (tx.nodes(), ty.nodes());
    let mut by_depth_x: Vec<Vec<usize>> = vec![Vec::new(); tx.steps() + 1];
    let mut by_depth_y: Vec<Vec<usize>> = vec![Vec::new(); ty.steps() + 1];
    nx.iter().enumerate().for_each(|(i, n)| by_depth_x[n.depth].push(i));
    ny.iter().enumerate().for_each(|(i, n)| by_depth_y[n.depth].push(i));

    // value[u][v] for the current depth, indexed via position maps.
    let mut pos_x = vec![0usize; nx.len()];
    let mut pos_y = vec![0usize; ny.len()];
    for d in 0..=tx.steps() {
        by_depth_x[d].iter().enumerate().for_each(|(i, &u)| pos_x[u] = i);
        by_depth_y[d].iter().enumerate().for_each(|(i, &v)| pos_y[v] = i);
    }
    let n = tx.steps();
    let mut next = vec![0.0; by_depth_x[n].len() * by_depth_y[n].len()];
    for d in (0..n).rev() {
        let (xs, ys) = (&by_depth_x[d], &by_depth_y[d]);
        let width_next = by_depth_y[d + 1].len();
        let mut cur = vec![0.0; xs.len() * ys.len()];
        for (i, &u) in xs.iter().enumerate() {
            let cu = &nx[u].children;
            let p: Vec<f64> = cu.iter().map(|&c| nx[c].prob).collect();
            for (j, &v) in ys.iter().enumerate() {
                let cv = &ny[v].children;
                let q: Vec<f64> = cv.iter().map(|&c| ny[c].prob).collect();
                let c: Vec<Vec<f64>> = cu
                    .iter()
                    .map(|&a| {
                        cv.iter()
                            .map(|&b| step_cost(d + 1, a, b) + next[pos_x[a] * width_next + pos_y[b]])
                            .collect()
                    })
                    .collect();
                cur[i * ys.len() + j] = small_ot(&p, &q, &c);
            }
        }
        next = cur;
    }
    Ok(next[0])
}

/// Exact classical transport between two small discrete distributions, by
/// successive shortest augmenting paths (Bellman–Ford on the residual
/// bipartite network).
pub fn small_ot(p: &[f64], q: &[f64], c: &[Vec<f64>]) -> f64 {
    const EPS: f64 = 1e-15;
    let (m, n) = (p.len(), q.len());
    let mut flow = vec![vec![0.0; n]; m];
    let mut sent = vec![0.0; m];
    let mut recv = vec![0.0; n];
    // Node ids: 0..m sources, m..m+n sinks; the super source/sink are implicit.
    loop {
        let mut dist = vec![f64::INFINITY; m + n];
        let mut prev = vec![usize::MAX; m + n];
        for i in 0..m {
            if p[i] - sent[i] > EPS {
                dist[i] = 0.0;
            }
        }
        for _ in 0..m + n {
            let mut changed = false;
            for i in 0..m {
                if dist[i].is_finite() {
                    for j in 0..n {
                        let d = dist[i] + c[i][j];
                        if d < dist[m + j] - 1e-15 {
                            dist[m + j] = d;
                            prev[m + j] = i;
                            changed = true;
                        }
                    }
                }
            }
            for j in 0..n {
                if dist[m + j].is_finite() {
                    for i in 0..m {
                        if flow[i][j] > EPS {
                            let d = dist[m + j] - c[i][j];
                            if d < dist[i] - 1e-15 {
                                dist[i] = d;
                                prev[i] = m + j;
                                changed = true;
                            }
                        }
                    }
                }
            }
            if !changed {
                break;
            }
        }
        let target = (0..n)
            .filter(|&j| q[j] - recv[j] > EPS && dist[m + j].is_finite())
            .min_by(|&a, &b| dist[m + a].total_cmp(&dist[m + b]));
        let Some(tj) = target else { break };
        // Walk back to find the bottleneck.
        let mut amount = q[tj] - recv[tj];
        let mut node = m + tj;
        let start;
        loop {
            if node >= m {
                let i = prev[node];
                node = i;
            } else if prev[node] == usize::MAX {
                start = node;
                break;
            } else {
                let j = prev[node] - m;
                amount = amount.min(flow[node][j]);
                node = m + j;
            }
        }
        amount = amount.min(p[start] - sent[start]);
        let mut node = m + tj;
        while node >= m || prev[node] != usize::MAX {
            if node >= m {
                let i = prev[node];
                flow[i][node - m] += amount;
                node = i;
            } else {
                let j = prev[node] - m;
                flow[node][j] -= amount;
                node = m + j;
            }
        }
        sent[start] += amount;
        recv[tj] += amount;
    }
    (0..m).map(|i| (0..n).map(|j| flow[i][j] * c[i][j]).sum::<f64>()).sum()
}

/// Discrete information drift α(k, g) = E^ν[Δω_{k+1} | g]/dt on the atoms
/// of an enlarged filtration.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftField {
    /// `alpha[k][g]`, k = 0..N−1, g indexing the atoms of G_k.
    pub alpha: Vec<Vec<f64>>,
    /// ν(g) for the same index.
    pub mass: Vec<Vec<f64>>,
    pub dt: f64,
    /// Number of zero-mass atoms skipped (their α is set to 0).
    pub skipped: usize,
}

pub fn drift_field(ty: &ScenarioTree, f_y: &FiltrationSeq, g: &FiltrationSeq) -> Result<DriftField> {
    if g.steps() != ty.steps() || g.at(0).n_leaves() != ty.n_leaves() {
        return invalid("filtration does not match the tree");
    }
    if !g.contains(f_y) {
        return invalid("drift needs an enlargement of the natural filtration");
    }
    let nu = ty.leaf_prob();
    let dt = ty.dt();
    let mut alpha = Vec::with_capacity(ty.steps());
    let mut mass = Vec::with_capacity(ty.steps());
    let mut skipped = 0;
    for k in 0..ty.steps() {
        let mut a_k = Vec::with_capacity(g.at(k).len());
        let mut m_k = Vec::with_capacity(g.at(k).len());
        for atom in g.at(k).atoms() {
            let m = ty.mass(atom);
            if m < MASS_TOL {
                skipped += 1;
                a_k.push(0.0);
            } else {
                let s: f64 = atom.iter().map(|&y| nu[y] * ty.incr(y, k + 1)).sum();
                a_k.push(s / (m * dt));
            }
            m_k.push(m);
        }
        alpha.push(a_k);
        mass.push(m_k);
    }
    Ok(DriftField { alpha, mass, dt, skipped })
}

/// Closed-form refined dual value and its optimiser F̂ = ρ'(α).
#[derive(Debug, Clone, PartialEq)]
pub struct RefinedDual {
    pub value: f64,
    pub fhat: Vec<Vec<f64>>,
    /// max |ρ*(F̂) + ρ(α) − α·F̂| over atoms.
    pub fenchel_young_residual: f64,
}

pub fn refined_dual_value(drift: &DriftField, rho: Rho) -> RefinedDual {
    let mut value = 0.0;
    let mut fy = 0.0f64;
    let fhat = drift
        .alpha
        .iter()
        .zip(&drift.mass)
        .map(|(ak, mk)| {
            ak.iter()
                .zip(mk)
                .map(|(&a, &m)| {
                    value += m * rho.eval(a) * drift.dt;
                    let fh = rho.deriv(a);
                    fy = fy.max((rho.conjugate(fh) + rho.eval(a) - a * fh).abs());
                    fh
                })
                .collect()
        })
        .collect();
    RefinedDual { value, fhat, fenchel_young_residual: fy }
}
