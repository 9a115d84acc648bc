//! Equality-form linear programs `min cᵀx, Ax = b, x ≥ 0`.
//!
//! Two backends are available. The default is a self-contained dense
//! revised simplex (explicit basis inverse, two phases, Dantzig pricing
//! over partial segments with a Bland fallback on degenerate stalls) which
//! also returns dual multipliers. Instances too large for a dense basis
//! inverse can be routed explicitly to a sparse simplex, which reports
//! primal values only.
//!
//! Before solving, the problem is split into independent blocks (connected
//! components of the variable/row incidence graph); each block is solved
//! on its own and the results are stitched back together.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Primal feasibility tolerance.
pub const FEAS_TOL: f64 = 1e-9;
/// Reduced-cost optimality tolerance.
pub const COST_TOL: f64 = 1e-10;
/// Smallest admissible pivot magnitude.
const PIVOT_TOL: f64 = 1e-9;
/// Consecutive degenerate pivots tolerated before switching to Bland's rule.
const DEGENERATE_RUN: usize = 50;

/// Largest block (rows, variables) handed to the dense backend by `Backend::Auto`.
pub const DENSE_MAX_ROWS: usize = 1500;
pub const DENSE_MAX_VARS: usize = 8000;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LpProblem {
    n_vars: usize,
    cost: Vec<f64>,
    rows: Vec<Vec<(usize, f64)>>,
    rhs: Vec<f64>,
}

impl LpProblem {
    pub fn new(cost: Vec<f64>) -> Self {
        Self { n_vars: cost.len(), cost, rows: Vec::new(), rhs: Vec::new() }
    }

    /// Adds the equality `Σ coef·x_var = rhs` and returns its row index.
    /// Zero coefficients are dropped and repeated variables merged.
    pub fn add_row(&mut self, mut coefs: Vec<(usize, f64)>, rhs: f64) -> usize {
        coefs.sort_by_key(|c| c.0);
        let mut merged: Vec<(usize, f64)> = Vec::with_capacity(coefs.len());
        for (j, v) in coefs {
            assert!(j < self.n_vars, "variable {j} out of range");
            match merged.last_mut() {
                Some(last) if last.0 == j => last.1 += v,
                _ => merged.push((j, v)),
            }
        }
        merged.retain(|c| c.1 != 0.0);
        self.rows.push(merged);
        self.rhs.push(rhs);
        self.rows.len() - 1
    }

    pub fn n_vars(&self) -> usize {
        self.n_vars
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn cost(&self) -> &[f64] {
        &self.cost
    }

    pub fn row(&self, r: usize) -> &[(usize, f64)] {
        &self.rows[r]
    }

    pub fn rhs(&self) -> &[f64] {
        &self.rhs
    }

    /// Maximal absolute equality residual of `x`.
    pub fn residual(&self, x: &[f64]) -> f64 {
        self.rows
            .iter()
            .zip(&self.rhs)
            .map(|(row, b)| (row.iter().map(|&(j, v)| v * x[j]).sum::<f64>() - b).abs())
            .fold(0.0, f64::max)
    }

    /// Reduced costs `c − Aᵀy`.
    pub fn reduced_costs(&self, y: &[f64]) -> Vec<f64> {
        let mut d = self.cost.clone();
        for (row, &yr) in self.rows.iter().zip(y) {
            for &(j, v) in row {
                d[j] -= yr * v;
            }
        }
        d
    }

    /// Connected components: (rows, variables) of each independent block.
    pub fn blocks(&self) -> Vec<(Vec<usize>, Vec<usize>)> {
        let n = self.n_vars;
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(p: &mut [usize], mut i: usize) -> usize {
            while p[i] != i {
                p[i] = p[p[i]];
                i = p[i];
            }
            i
        }
        for row in &self.rows {
            if let Some(&(first, _)) = row.first() {
                let a = find(&mut parent, first);
                for &(j, _) in &row[1..] {
                    let b = find(&mut parent, j);
                    if a != b {
                        parent[b] = a;
                    }
                }
            }
        }
        let mut block_of_root = vec![usize::MAX; n];
        let mut blocks: Vec<(Vec<usize>, Vec<usize>)> = Vec::new();
        for j in 0..n {
            let r = find(&mut parent, j);
            if block_of_root[r] == usize::MAX {
                block_of_root[r] = blocks.len();
                blocks.push((Vec::new(), Vec::new()));
            }
            blocks[block_of_root[r]].1.push(j);
        }
        for (i, row) in self.rows.iter().enumerate() {
            if let Some(&(first, _)) = row.first() {
                let r = find(&mut parent, first);
                blocks[block_of_root[r]].0.push(i);
            }
        }
        blocks
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
    IterationLimit,
}

impl LpStatus {
    pub fn name(&self) -> &'static str {
        match self {
            LpStatus::Optimal => "optimal",
            LpStatus::Infeasible => "infeasible",
            LpStatus::Unbounded => "unbounded",
            LpStatus::IterationLimit => "iteration-limited",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    /// Dense simplex when every block fits, sparse otherwise.
    #[default]
    Auto,
    Dense,
    Sparse,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpSolution {
    pub status: LpStatus,
    /// Primal objective cᵀx.
    pub value: f64,
    /// Dual objective bᵀy (NaN when duals are unavailable).
    pub dual_value: f64,
    pub x: Vec<f64>,
    /// Dual multipliers, one per row, when the backend provides them.
    pub duals: Option<Vec<f64>>,
    pub iterations: usize,
    /// True when at least one block went to the sparse backend.
    pub used_sparse: bool,
}

impl LpSolution {
    pub fn duality_gap(&self) -> Option<f64> {
        self.duals.as_ref().map(|_| (self.value - self.dual_value).abs())
    }
}

/// Solves `p` with the requested backend.
pub fn solve(p: &LpProblem, backend: Backend) -> Result<LpSolution> {
    for (row, &b) in p.rows.iter().zip(&p.rhs) {
        if row.is_empty() && b.abs() > FEAS_TOL {
            return Ok(LpSolution {
                status: LpStatus::Infeasible,
                value: f64::NAN,
                dual_value: f64::NAN,
                x: vec![0.0; p.n_vars],
                duals: None,
                iterations: 0,
                used_sparse: false,
            });
        }
    }
    let mut x = vec![0.0; p.n_vars];
    let mut y = vec![0.0; p.n_rows()];
    let mut have_duals = true;
    let mut iterations = 0;
    let mut used_sparse = false;
    for (rows, vars) in p.blocks() {
        let mut local_of = vec![usize::MAX; p.n_vars];
        for (l, &j) in vars.iter().enumerate() {
            local_of[j] = l;
        }
        let block = Block {
            cost: vars.iter().map(|&j| p.cost[j]).collect(),
            rows: rows.iter().map(|&r| p.rows[r].iter().map(|&(j, v)| (local_of[j], v)).collect()).collect(),
            rhs: rows.iter().map(|&r| p.rhs[r]).collect(),
        };
        let sparse = match backend {
            Backend::Dense => false,
            Backend::Sparse => true,
            Backend::Auto => rows.len() > DENSE_MAX_ROWS || vars.len() > DENSE_MAX_VARS,
        };
        let out = if sparse {
            used_sparse = true;
            solve_sparse(&block)?
        } else {
            DenseSimplex::new(&block).run()
        };
        iterations += out.iterations;
        if out.status != LpStatus::Optimal {
            return Ok(LpSolution {
                status: out.status,
                value: f64::NAN,
                dual_value: f64::NAN,
                x,
                duals: None,
                iterations,
                used_sparse,
            });
        }
        for (l, &j) in vars.iter().enumerate() {
            x[j] = out.x[l];
        }
        match out.y {
            Some(yb) => rows.iter().zip(yb).for_each(|(&r, v)| y[r] = v),
            None => have_duals = false,
        }
    }
    let value = p.cost.iter().zip(&x).map(|(c, v)| c * v).sum();
    let (duals, dual_value) = if have_duals {
        let dv = p.rhs.iter().zip(&y).map(|(b, v)| b * v).sum();
        (Some(y), dv)
    } else {
        (None, f64::NAN)
    };
    Ok(LpSolution { status: LpStatus::Optimal, value, dual_value, x, duals, iterations, used_sparse })
}

struct Block {
    cost: Vec<f64>,
    rows: Vec<Vec<(usize, f64)>>,
    rhs: Vec<f64>,
}

struct BlockSolution {
    status: LpStatus,
    x: Vec<f64>,
    y: Option<Vec<f64>>,
    iterations: usize,
}

fn solve_sparse(b: &Block) -> Result<BlockSolution> {
    use microlp::{ComparisonOp, OptimizationDirection, Problem};
    let mut prob = Problem::new(OptimizationDirection::Minimize);
    let vars: Vec<_> = b.cost.iter().map(|&c| prob.add_var(c, (0.0, f64::INFINITY))).collect();
    for (row, &rhs) in b.rows.iter().zip(&b.rhs) {
        let expr: Vec<_> = row.iter().map(|&(j, v)| (vars[j], v)).collect();
        prob.add_constraint(expr.as_slice(), ComparisonOp::Eq, rhs);
    }
    let status = |s| BlockSolution { status: s, x: vec![0.0; b.cost.len()], y: None, iterations: 0 };
    match prob.solve() {
        Ok(outcome) => match outcome.into_solution() {
            Ok(sol) => {
                let x = vars.iter().map(|&v| sol.var_value(v).max(0.0)).collect();
                Ok(BlockSolution { status: LpStatus::Optimal, x, y: None, iterations: 0 })
            }
            Err(_) => Ok(status(LpStatus::IterationLimit)),
        },
        Err(microlp::Error::Infeasible) => Ok(status(LpStatus::Infeasible)),
        Err(microlp::Error::Unbounded) => Ok(status(LpStatus::Unbounded)),
        Err(e) => Err(Error::Consistency(format!("sparse simplex failed: {e}"))),
    }
}

/// Dense revised simplex on one block.
///
/// Columns `0..n` are structural, `n..n+m` artificial. The basis inverse is
/// stored column-major so that both `B⁻¹a` and `c_Bᵀ B⁻¹` walk contiguous
/// memory.
struct DenseSimplex {
    m: usize,
    n: usize,
    /// Structural columns, CSC-like: (row, value) pairs per column.
    cols: Vec<Vec<(usize, f64)>>,
    cost: Vec<f64>,
    b: Vec<f64>,
    /// Sign applied to each row so that `b ≥ 0`.
    row_sign: Vec<f64>,
    binv: Vec<f64>,
    basis: Vec<usize>,
    in_basis: Vec<bool>,
    xb: Vec<f64>,
    iterations: usize,
    max_iterations: usize,
    price_start: usize,
}

impl DenseSimplex {
    fn new(block: &Block) -> Self {
        let m = block.rows.len();
        let n = block.cost.len();
        let row_sign: Vec<f64> = block.rhs.iter().map(|&b| if b < 0.0 { -1.0 } else { 1.0 }).collect();
        let mut cols = vec![Vec::new(); n];
        for (i, row) in block.rows.iter().enumerate() {
            for &(j, v) in row {
                cols[j].push((i, v * row_sign[i]));
            }
        }
        let b: Vec<f64> = block.rhs.iter().zip(&row_sign).map(|(b, s)| b * s).collect();
        let mut binv = vec![0.0; m * m];
        for i in 0..m {
            binv[i * m + i] = 1.0;
        }
        let mut in_basis = vec![false; n + m];
        in_basis[n..].iter_mut().for_each(|f| *f = true);
        Self {
            m,
            n,
            cols,
            cost: block.cost.clone(),
            xb: b.clone(),
            b,
            row_sign,
            binv,
            basis: (n..n + m).collect(),
            in_basis,
            iterations: 0,
            max_iterations: 50 * (n + m) + 10_000,
            price_start: 0,
        }
    }

    fn column(&self, j: usize) -> Vec<(usize, f64)> {
        if j < self.n {
            self.cols[j].clone()
        } else {
            vec![(j - self.n, 1.0)]
        }
    }

    /// u = B⁻¹ a_j.
    fn ftran(&self, j: usize) -> Vec<f64> {
        let m = self.m;
        let mut u = vec![0.0; m];
        for (r, v) in self.column(j) {
            let col = &self.binv[r * m..(r + 1) * m];
            for (ui, bi) in u.iter_mut().zip(col) {
                *ui += v * bi;
            }
        }
        u
    }

    /// y = c_Bᵀ B⁻¹ for the given basic costs.
    fn btran(&self, cb: &[f64]) -> Vec<f64> {
        let m = self.m;
        (0..m).map(|j| self.binv[j * m..(j + 1) * m].iter().zip(cb).map(|(a, c)| a * c).sum()).collect()
    }

    fn reduced_cost(&self, j: usize, costs: &dyn Fn(usize) -> f64, y: &[f64]) -> f64 {
        costs(j) - self.column_dot(j, y)
    }

    fn column_dot(&self, j: usize, y: &[f64]) -> f64 {
        if j < self.n {
            self.cols[j].iter().map(|&(r, v)| v * y[r]).sum()
        } else {
            y[j - self.n]
        }
    }

    /// Chooses an entering column among `candidates`.
    fn price(&mut self, costs: &dyn Fn(usize) -> f64, y: &[f64], allowed: usize, bland: bool) -> Option<usize> {
        if bland {
            return (0..allowed).find(|&j| !self.in_basis[j] && self.reduced_cost(j, costs, y) < -COST_TOL);
        }
        // Partial pricing: scan segments cyclically and take the most
        // negative reduced cost of the first segment that has one.
        let seg = (allowed / 8).max(64).min(allowed.max(1));
        let n_seg = allowed.div_ceil(seg);
        for s in 0..n_seg {
            let start = (self.price_start + s * seg) % allowed;
            let mut best = None;
            let mut best_d = -COST_TOL;
            for off in 0..seg.min(allowed) {
                let j = (start + off) % allowed;
                if self.in_basis[j] {
                    continue;
                }
                let d = self.reduced_cost(j, costs, y);
                if d < best_d {
                    best_d = d;
                    best = Some(j);
                }
            }
            if best.is_some() {
                self.price_start = (start + seg) % allowed;
                return best;
            }
        }
        None
    }

    fn pivot(&mut self, r: usize, q: usize, u: &[f64]) {
        let m = self.m;
        let theta = self.xb[r] / u[r];
        for i in 0..m {
            if i != r {
                self.xb[i] -= theta * u[i];
                if self.xb[i] < 0.0 && self.xb[i] > -FEAS_TOL {
                    self.xb[i] = 0.0;
                }
            }
        }
        self.xb[r] = theta;
        let ur = u[r];
        for col in self.binv.chunks_exact_mut(m) {
            let e = col[r] / ur;
            if e != 0.0 {
                for (ci, ui) in col.iter_mut().zip(u) {
                    *ci -= ui * e;
                }
            }
            col[r] = e;
        }
        self.in_basis[self.basis[r]] = false;
        self.in_basis[q] = true;
        self.basis[r] = q;
        self.iterations += 1;
        let refactor_every = 100.max(self.m);
        if self.iterations % refactor_every == 0 {
            self.refactor();
        }
    }

    /// Recomputes B⁻¹ from scratch (Gauss–Jordan with partial pivoting) and
    /// the basic solution from it.
    fn refactor(&mut self) {
        let m = self.m;
        // Row-major copy of B, then invert in place.
        let mut a = vec![0.0; m * m];
        for (c, &j) in self.basis.iter().enumerate() {
            for (r, v) in self.column(j) {
                a[r * m + c] = v;
            }
        }
        let mut inv = vec![0.0; m * m];
        for i in 0..m {
            inv[i * m + i] = 1.0;
        }
        for c in 0..m {
            let p = (c..m).max_by(|&i, &k| a[i * m + c].abs().total_cmp(&a[k * m + c].abs())).unwrap_or(c);
            if a[p * m + c].abs() < 1e-14 {
                return; // keep the product-form inverse
            }
            if p != c {
                for k in 0..m {
                    a.swap(p * m + k, c * m + k);
                    inv.swap(p * m + k, c * m + k);
                }
            }
            let d = a[c * m + c];
            for k in 0..m {
                a[c * m + k] /= d;
                inv[c * m + k] /= d;
            }
            for i in 0..m {
                if i != c {
                    let f = a[i * m + c];
                    if f != 0.0 {
                        for k in 0..m {
                            a[i * m + k] -= f * a[c * m + k];
                            inv[i * m + k] -= f * inv[c * m + k];
                        }
                    }
                }
            }
        }
        // `inv` is row-major B⁻¹; store column-major.
        for i in 0..m {
            for j in 0..m {
                self.binv[j * m + i] = inv[i * m + j];
            }
        }
        let mut xb = vec![0.0; m];
        for (j, &bj) in self.b.iter().enumerate() {
            if bj != 0.0 {
                for (x, v) in xb.iter_mut().zip(&self.binv[j * m..(j + 1) * m]) {
                    *x += v * bj;
                }
            }
        }
        for v in xb.iter_mut() {
            if *v < 0.0 && *v > -FEAS_TOL {
                *v = 0.0;
            }
        }
        self.xb = xb;
    }

    /// Runs simplex iterations on the current phase. Returns `None` on
    /// success, or a terminal status.
    fn iterate(&mut self, costs: &dyn Fn(usize) -> f64, allowed: usize) -> Option<LpStatus> {
        let mut degenerate_run = 0usize;
        loop {
            if self.iterations >= self.max_iterations {
                return Some(LpStatus::IterationLimit);
            }
            let cb: Vec<f64> = self.basis.iter().map(|&j| costs(j)).collect();
            let y = self.btran(&cb);
            let bland = degenerate_run >= DEGENERATE_RUN;
            let Some(q) = self.price(costs, &y, allowed, bland) else {
                return None;
            };
            let u = self.ftran(q);
            let mut leave: Option<usize> = None;
            let mut best_ratio = f64::INFINITY;
            for i in 0..self.m {
                if u[i] > PIVOT_TOL {
                    let ratio = self.xb[i].max(0.0) / u[i];
                    let better = match leave {
                        None => true,
                        Some(l) => {
                            if ratio < best_ratio - 1e-12 {
                                true
                            } else if ratio <= best_ratio + 1e-12 {
                                if bland {
                                    self.basis[i] < self.basis[l]
                                } else {
                                    u[i] > u[l]
                                }
                            } else {
                                false
                            }
                        }
                    };
                    if better {
                        best_ratio = best_ratio.min(ratio);
                        leave = Some(i);
                    }
                }
            }
            let Some(r) = leave else {
                return Some(LpStatus::Unbounded);
            };
            if best_ratio <= 1e-12 {
                degenerate_run += 1;
            } else {
                degenerate_run = 0;
            }
            self.pivot(r, q, &u);
        }
    }

    fn run(mut self) -> BlockSolution {
        let n = self.n;
        let m = self.m;
        let total = n + m;

        // Phase 1: minimise the sum of artificials.
        let phase1 = |j: usize| if j >= n { 1.0 } else { 0.0 };
        if let Some(status) = self.iterate(&phase1, total) {
            return self.failed(status);
        }
        self.refactor();
        let infeas: f64 = self.basis.iter().zip(&self.xb).filter(|(&j, _)| j >= n).map(|(_, &v)| v).sum();
        let scale = 1.0 + self.b.iter().fold(0.0f64, |a, &v| a.max(v));
        if infeas > FEAS_TOL * scale {
            return self.failed(LpStatus::Infeasible);
        }

        // Drive zero-level artificials out of the basis where possible;
        // those that cannot leave sit on redundant rows.
        for r in 0..m {
            if self.basis[r] < n {
                continue;
            }
            let row: Vec<f64> = (0..m).map(|k| self.binv[k * m + r]).collect();
            let mut best: Option<(usize, f64)> = None;
            for j in 0..n {
                if self.in_basis[j] {
                    continue;
                }
                let v: f64 = self.cols[j].iter().map(|&(k, a)| a * row[k]).sum();
                if v.abs() > PIVOT_TOL && best.is_none_or(|(_, bv)| v.abs() > bv.abs()) {
                    best = Some((j, v));
                }
            }
            if let Some((j, _)) = best {
                let u = self.ftran(j);
                let saved = self.xb[r];
                self.xb[r] = 0.0;
                self.pivot(r, j, &u);
                debug_assert!(saved.abs() <= FEAS_TOL * scale);
            }
        }

        // Phase 2 over structural columns only.
        let cost = self.cost.clone();
        let phase2 = move |j: usize| if j < n { cost[j] } else { 0.0 };
        if let Some(status) = self.iterate(&phase2, n) {
            return self.failed(status);
        }
        self.refactor();
        let mut x = vec![0.0; n];
        for (&j, &v) in self.basis.iter().zip(&self.xb) {
            if j < n {
                x[j] = v.max(0.0);
            }
        }
        let cb: Vec<f64> = self.basis.iter().map(|&j| phase2(j)).collect();
        let y: Vec<f64> = self.btran(&cb).iter().zip(&self.row_sign).map(|(v, s)| v * s).collect();
        BlockSolution { status: LpStatus::Optimal, x, y: Some(y), iterations: self.iterations }
    }

    fn failed(&self, status: LpStatus) -> BlockSolution {
        BlockSolution { status, x: vec![0.0; self.n], y: None, iterations: self.iterations }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> LpProblem {
        // min x0 + 2x1 + 3x2  s.t. x0 + x1 + x2 = 1, x1 − x2 = 0.
        let mut p = LpProblem::new(vec![1.0, 2.0, 3.0]);
        p.add_row(vec![(0, 1.0), (1, 1.0), (2, 1.0)], 1.0);
        p.add_row(vec![(1, 1.0), (2, -1.0)], 0.0);
        p
    }

    #[test]
    fn solves_small_problem() {
        let s = solve(&small(), Backend::Dense).unwrap();
        assert_eq!(s.status, LpStatus::Optimal);
        assert!((s.value - 1.0).abs() < 1e-12);
        assert!(s.duality_gap().unwrap() < 1e-12);
    }

    #[test]
    fn sparse_backend_agrees() {
        let s = solve(&small(), Backend::Sparse).unwrap();
        assert!((s.value - 1.0).abs() < 1e-9);
        assert!(s.duals.is_none());
    }

    #[test]
    fn detects_infeasible() {
        let mut p = LpProblem::new(vec![1.0, 1.0]);
        p.add_row(vec![(0, 1.0), (1, 1.0)], 1.0);
        p.add_row(vec![(0, 1.0), (1, 1.0)], 2.0);
        assert_eq!(solve(&p, Backend::Dense).unwrap().status, LpStatus::Infeasible);
    }

    #[test]
    fn detects_unbounded() {
        let mut p = LpProblem::new(vec![-1.0, 0.0]);
        p.add_row(vec![(0, 1.0), (1, -1.0)], 0.0);
        assert_eq!(solve(&p, Backend::Dense).unwrap().status, LpStatus::Unbounded);
    }

    #[test]
    fn tolerates_redundant_rows() {
        let mut p = small();
        p.add_row(vec![(0, 2.0), (1, 2.0), (2, 2.0)], 2.0);
        let s = solve(&p, Backend::Dense).unwrap();
        assert!((s.value - 1.0).abs() < 1e-12);
        assert!((s.value - s.dual_value).abs() < 1e-12);
    }

    #[test]
    fn splits_independent_blocks() {
        let mut p = LpProblem::new(vec![1.0, 2.0, 5.0, 1.0]);
        p.add_row(vec![(0, 1.0), (1, 1.0)], 1.0);
        p.add_row(vec![(2, 1.0), (3, 1.0)], -3.0);
        p.add_row(vec![(2, -1.0), (3, -1.0)], 3.0);
        let s = solve(&p, Backend::Dense).unwrap();
        assert_eq!(s.status, LpStatus::Infeasible);
        let mut q = LpProblem::new(vec![1.0, 2.0, 5.0, 1.0]);
        q.add_row(vec![(0, 1.0), (1, 1.0)], 1.0);
        q.add_row(vec![(2, -1.0), (3, -1.0)], -3.0);
        let s = solve(&q, Backend::Dense).unwrap();
        assert!((s.value - 4.0).abs() < 1e-12);
        assert!((s.dual_value - 4.0).abs() < 1e-12);
    }
}
