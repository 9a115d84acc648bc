//! Transport costs between discrete paths.
//!
//! Paths are passed as cumulative values `ω_0 … ω_N` (with `ω_0 = 0`).

use std::io::Read;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::pathspace::ScenarioTree;

/// Default cap on the number of leaf pairs of a cost matrix.
pub const PAIR_CAP: usize = 1 << 22;

/// Even convex gauge function ρ of the Cameron–Martin cost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Rho {
    /// ρ(x) = x²/2.
    Quadratic,
    /// ρ(x) = |x|^p / p with p ∈ (1, 8].
    Power(f64),
}

impl Rho {
    pub fn power(p: f64) -> Result<Self> {
        if !(p > 1.0 && p <= 8.0) {
            return invalid(format!("power exponent must lie in (1, 8], got {p}"));
        }
        if p == 2.0 {
            return Ok(Rho::Quadratic);
        }
        Ok(Rho::Power(p))
    }

    pub fn exponent(&self) -> f64 {
        match *self {
            Rho::Quadratic => 2.0,
            Rho::Power(p) => p,
        }
    }

    /// Hölder conjugate exponent q, 1/p + 1/q = 1.
    pub fn conjugate_exponent(&self) -> f64 {
        let p = self.exponent();
        p / (p - 1.0)
    }

    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            Rho::Quadratic => 0.5 * x * x,
            Rho::Power(p) => x.abs().powf(p) / p,
        }
    }

    /// Derivative ρ'(x).
    pub fn deriv(&self, x: f64) -> f64 {
        match *self {
            Rho::Quadratic => x,
            Rho::Power(p) => x.signum() * x.abs().powf(p - 1.0),
        }
    }

    /// Convex conjugate ρ*(v) = sup_x (v·x − ρ(x)).
    pub fn conjugate(&self, v: f64) -> f64 {
        match *self {
            Rho::Quadratic => 0.5 * v * v,
            Rho::Power(_) => {
                let q = self.conjugate_exponent();
                v.abs().powf(q) / q
            }
        }
    }

    /// Derivative of the conjugate, (ρ*)'(v), the inverse of ρ'.
    pub fn conjugate_deriv(&self, v: f64) -> f64 {
        match *self {
            Rho::Quadratic => v,
            Rho::Power(_) => {
                let q = self.conjugate_exponent();
                v.signum() * v.abs().powf(q - 1.0)
            }
        }
    }

    /// Numerical check on a grid that ρ is even, convex, vanishes at 0 and
    /// increases strictly on [0, ∞).
    pub fn check_grid(&self) -> Result<()> {
        if self.eval(0.0) != 0.0 {
            return invalid("ρ(0) ≠ 0");
        }
        let grid: Vec<f64> = (0..=400).map(|i| i as f64 * 0.025).collect();
        for w in grid.windows(3) {
            let (a, b, c) = (self.eval(w[0]), self.eval(w[1]), self.eval(w[2]));
            if b <= a || c <= b {
                return invalid("ρ is not strictly increasing on [0, ∞)");
            }
            if a + c - 2.0 * b < -1e-12 {
                return invalid("ρ is not convex");
            }
        }
        for &x in &grid {
            if (self.eval(x) - self.eval(-x)).abs() > 1e-12 * (1.0 + self.eval(x)) {
                return invalid("ρ is not even");
            }
        }
        Ok(())
    }
}

/// Transport cost between pairs of paths.
#[derive(Debug, Clone, PartialEq)]
pub enum CostSpec {
    TotalVariation,
    CameronMartin(Rho),
    SupMetric,
    Explicit(ExplicitMatrix),
}

/// JSON cost configuration, `{"cost": "tv" | "cm" | "sup", "p": 2.0}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostConfig {
    pub cost: String,
    #[serde(default)]
    pub p: Option<f64>,
}

impl CostConfig {
    pub fn to_spec(&self) -> Result<CostSpec> {
        match self.cost.as_str() {
            "tv" => Ok(CostSpec::TotalVariation),
            "cm" => Ok(CostSpec::CameronMartin(Rho::power(self.p.unwrap_or(2.0))?)),
            "sup" => Ok(CostSpec::SupMetric),
            other => invalid(format!("unknown cost '{other}' (expected tv, cm or sup)")),
        }
    }
}

fn check_len(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch(x.len(), y.len()));
    }
    Ok(())
}

fn diff_increments<'a>(x: &'a [f64], y: &'a [f64]) -> impl Iterator<Item = f64> + 'a {
    x.windows(2).zip(y.windows(2)).map(|(a, b)| (b[1] - b[0]) - (a[1] - a[0]))
}

/// Discrete total variation of `y − x`: Σ_k |Δy_k − Δx_k|.
pub fn tv_cost(x: &[f64], y: &[f64]) -> Result<f64> {
    check_len(x, y)?;
    Ok(diff_increments(x, y).map(f64::abs).sum())
}

/// Discrete Cameron–Martin cost Σ_k ρ((Δy_k − Δx_k)/dt)·dt.
pub fn cm_cost(x: &[f64], y: &[f64], rho: Rho, dt: f64) -> Result<f64> {
    check_len(x, y)?;
    if !(dt > 0.0) {
        return invalid(format!("dt must be positive, got {dt}"));
    }
    Ok(diff_increments(x, y).map(|d| rho.eval(d / dt) * dt).sum())
}

/// Uniform distance max_k |x_k − y_k|.
pub fn sup_metric(x: &[f64], y: &[f64]) -> Result<f64> {
    check_len(x, y)?;
    Ok(x.iter().zip(y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
}

/// Convex conjugate ρ*(v).
pub fn conjugate(rho: Rho, v: f64) -> f64 {
    rho.conjugate(v)
}

/// Dense row-major cost matrix over (source leaf, target leaf).
#[derive(Debug, Clone, PartialEq)]
pub struct ExplicitMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl ExplicitMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::LengthMismatch(data.len(), rows * cols));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return invalid(format!("cost entries must be finite and nonnegative, found {v}"));
        }
        Ok(Self { rows, cols, data })
    }

    /// Reads a headerless CSV of numbers, one matrix row per line.
    pub fn from_csv(reader: impl Read) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(reader);
        let mut data = Vec::new();
        let mut cols = None;
        let mut rows = 0;
        for rec in rdr.records() {
            let rec = rec?;
            if cols.is_some_and(|c| c != rec.len()) {
                return invalid(format!("ragged CSV row {rows}"));
            }
            cols = Some(rec.len());
            for field in rec.iter() {
                let v: f64 = field.parse().map_err(|_| Error::Invalid(format!("not a number: '{field}'")))?;
                data.push(v);
            }
            rows += 1;
        }
        Self::new(rows, cols.unwrap_or(0), data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn transpose(&self) -> Self {
        let mut data = vec![0.0; self.data.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                data[j * self.rows + i] = self.get(i, j);
            }
        }
        Self { rows: self.cols, cols: self.rows, data }
    }
}

/// Evaluates `spec` on every leaf pair of the two trees.
pub fn cost_matrix(tx: &ScenarioTree, ty: &ScenarioTree, spec: &CostSpec) -> Result<ExplicitMatrix> {
    cost_matrix_with_cap(tx, ty, spec, PAIR_CAP)
}

pub fn cost_matrix_with_cap(tx: &ScenarioTree, ty: &ScenarioTree, spec: &CostSpec, cap: usize) -> Result<ExplicitMatrix> {
    let (nx, ny) = (tx.n_leaves(), ty.n_leaves());
    let size = nx.saturating_mul(ny);
    if size > cap {
        return Err(Error::Capacity { what: "leaf pairs", size, cap });
    }
    if let CostSpec::Explicit(m) = spec {
        if m.rows != nx || m.cols != ny {
            return invalid(format!("explicit cost is {}x{}, trees have {nx}x{ny} leaves", m.rows, m.cols));
        }
        return Ok(m.clone());
    }
    if tx.steps() != ty.steps() {
        return Err(Error::LengthMismatch(tx.steps(), ty.steps()));
    }
    if let CostSpec::CameronMartin(_) = spec {
        if (tx.dt() - ty.dt()).abs() > 1e-12 {
            return invalid("Cameron–Martin cost needs a common time step");
        }
    }
    let ypaths: Vec<Vec<f64>> = (0..ny).map(|l| ty.path(l)).collect();
    let dt = tx.dt();
    let data: Vec<f64> = (0..nx)
        .into_par_iter()
        .flat_map_iter(|i| {
            let x = tx.path(i);
            ypaths
                .iter()
                .map(|y| match spec {
                    CostSpec::TotalVariation => tv_cost(&x, y),
                    CostSpec::CameronMartin(rho) => cm_cost(&x, y, *rho, dt),
                    CostSpec::SupMetric => sup_metric(&x, y),
                    CostSpec::Explicit(_) => unreachable!("handled above"),
                })
                .map(|r| r.unwrap_or(f64::NAN))
                .collect::<Vec<_>>()
        })
        .collect();
    ExplicitMatrix::new(nx, ny, data)
}
