//! Information carried by enlarged filtrations: partition entropy, the KL
//! chain rule on trees, drift energies, and Monte Carlo demos of the three
//! classical continuous-time enlargements (Brownian bridge, last zero
//! before T, Pitman's Bessel construction).

use std::collections::BTreeMap;
use std::f64::consts::{FRAC_2_SQRT_PI, SQRT_2};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::{erf, erfc};

use crate::causal::{refined_dual_value, DriftField, MASS_TOL};
use crate::costs::Rho;
use crate::error::{invalid, Result};
use crate::pathspace::{AtomLabeling, FiltrationSeq, ScenarioTree};

/// Entropy −Σ p ln p of a labelling, in nats.
pub fn partition_entropy(labels: &AtomLabeling) -> f64 {
    labels.probs().iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum()
}

/// Law of the next increment given a set of leaves, keyed by the increment
/// value at resolution 1e-12.
fn increment_law(tree: &ScenarioTree, leaves: &[usize], k: usize) -> BTreeMap<i64, f64> {
    let mut law = BTreeMap::new();
    let mass = tree.mass(leaves);
    for &l in leaves {
        let key = (tree.incr(l, k + 1) * 1e12).round() as i64;
        *law.entry(key).or_insert(0.0) += tree.leaf_prob()[l] / mass;
    }
    law
}

/// Σ_k E[KL(law(Δω_{k+1} | G_k) ‖ law(Δω_{k+1} | F_k))]. Returns +∞ when
/// a conditional law under G charges an increment that F rules out.
pub fn kl_information(tree: &ScenarioTree, f: &FiltrationSeq, g: &FiltrationSeq) -> Result<f64> {
    if !g.contains(f) {
        return invalid("KL information needs G to refine F");
    }
    let mut total = 0.0;
    for k in 0..tree.steps() {
        let (fk, gk) = (f.at(k), g.at(k));
        let f_laws: Vec<BTreeMap<i64, f64>> = fk.atoms().iter().map(|a| increment_law(tree, a, k)).collect();
        for atom in gk.atoms() {
            let m = tree.mass(atom);
            if m < MASS_TOL {
                continue;
            }
            let q = &f_laws[fk.atom_of(atom[0])];
            let mut kl = 0.0;
            for (key, p) in increment_law(tree, atom, k) {
                if p <= 0.0 {
                    continue;
                }
                match q.get(&key) {
                    Some(&qv) if qv > 0.0 => kl += p * (p / qv).ln(),
                    _ => return Ok(f64::INFINITY),
                }
            }
            total += m * kl;
        }
    }
    Ok(total)
}

/// E[Σ ρ(α)·dt] of a drift field.
pub fn drift_energy(drift: &DriftField, rho: Rho) -> f64 {
    refined_dual_value(drift, rho).value
}

/// Monte Carlo configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    pub paths: usize,
    pub grid: usize,
    pub seed: u64,
    pub horizon: f64,
    pub eps: f64,
}

/// Paths simulated per independent random stream.
const BATCH: usize = 1000;

impl McConfig {
    pub fn validate(&self) -> Result<()> {
        if self.paths < 1000 {
            return invalid(format!("need at least 1000 paths, got {}", self.paths));
        }
        if self.grid < 1 {
            return invalid("grid must have at least one step");
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return invalid(format!("horizon must be positive, got {}", self.horizon));
        }
        if !(self.eps > 0.0 && self.eps <= self.horizon) {
            return invalid(format!("truncation ε must lie in (0, T], got {}", self.eps));
        }
        Ok(())
    }

    /// Runs `per_path` on every path, batch by batch, each batch on its own
    /// ChaCha stream, and merges the statistics in batch order.
    fn run<const K: usize>(&self, per_path: impl Fn(&mut ChaCha8Rng) -> [f64; K] + Sync) -> [Moments; K] {
        let batches = self.paths.div_ceil(BATCH);
        let parts: Vec<[Moments; K]> = (0..batches)
            .into_par_iter()
            .map(|b| {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                rng.set_stream(b as u64);
                let n = BATCH.min(self.paths - b * BATCH);
                let mut acc = [Moments::default(); K];
                for _ in 0..n {
                    let v = per_path(&mut rng);
                    for (a, x) in acc.iter_mut().zip(v) {
                        a.push(x);
                    }
                }
                acc
            })
            .collect();
        let mut total = [Moments::default(); K];
        for p in parts {
            for (t, m) in total.iter_mut().zip(p) {
                t.merge(&m);
            }
        }
        total
    }
}

/// Streaming mean and variance (Welford, with Chan's merge).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Moments {
    pub n: u64,
    pub mean: f64,
    m2: f64,
}

impl Moments {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn merge(&mut self, o: &Moments) {
        if o.n == 0 {
            return;
        }
        let n = self.n + o.n;
        let d = o.mean - self.mean;
        self.mean += d * o.n as f64 / n as f64;
        self.m2 += o.m2 + d * d * self.n as f64 * o.n as f64 / n as f64;
        self.n = n;
    }

    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            return 0.0;
        }
        self.m2 / (self.n - 1) as f64
    }

    pub fn stderr(&self) -> f64 {
        (self.variance() / self.n as f64).sqrt()
    }
}

/// Estimate with its standard error and optional analytic target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub estimate: f64,
    pub stderr: f64,
    pub target: f64,
    /// Whether the estimate lies within 3 standard errors of the target.
    pub pass: bool,
}

/// Truncated energy ½∫₀^{T−ε} ((B_T − B_t)/(T − t))² dt of the Brownian
/// bridge drift; the exact expectation is ½ ln(T/ε).
pub fn mc_bridge_energy(cfg: &McConfig) -> Result<McEstimate> {
    cfg.validate()?;
    let (t, eps) = (cfg.horizon, cfg.eps);
    let target = 0.5 * (t / eps).ln();
    if eps >= t {
        return Ok(McEstimate { estimate: 0.0, stderr: 0.0, target, pass: true });
    }
    let n = cfg.grid;
    let h = (t - eps) / n as f64;
    let sh = h.sqrt();
    let [m] = cfg.run(|rng| {
        let mut b = Vec::with_capacity(n + 1);
        let mut cur = 0.0;
        b.push(cur);
        for _ in 0..n {
            cur += sh * rng.sample::<f64, _>(StandardNormal);
            b.push(cur);
        }
        let bt = cur + eps.sqrt() * rng.sample::<f64, _>(StandardNormal);
        let f = |i: usize| {
            let d = (bt - b[i]) / (t - i as f64 * h);
            0.5 * d * d
        };
        let inner: f64 = (1..n).map(f).sum();
        [h * (0.5 * f(0) + inner + 0.5 * f(n))]
    });
    let (estimate, stderr) = (m.mean, m.stderr());
    Ok(McEstimate { estimate, stderr, target, pass: (estimate - target).abs() <= 3.0 * stderr })
}

/// Φ(x) = √(2/π)∫_x^∞ e^{−u²/2} du = erfc(x/√2).
pub fn phi_tail(x: f64) -> f64 {
    erfc(x / SQRT_2)
}

/// 1 − Φ(x), evaluated without cancellation.
pub fn one_minus_phi_tail(x: f64) -> f64 {
    erf(x / SQRT_2)
}

/// Drift of B in its progressive enlargement by the last zero τ before T.
/// `before_tau` selects the branch (t ≤ τ or τ < t ≤ T).
pub fn progressive_drift(b: f64, t: f64, horizon: f64, bt_sign: f64, before_tau: bool) -> f64 {
    let s = (horizon - t).sqrt();
    let x = b.abs() / s;
    // √(2/π) = FRAC_2_SQRT_PI / √2.
    let dens = FRAC_2_SQRT_PI / SQRT_2 * (-0.5 * x * x).exp() / s;
    if before_tau {
        -dens * b.signum() * f64::from(b != 0.0) / phi_tail(x)
    } else {
        dens * bt_sign / one_minus_phi_tail(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProgressiveDiagnostics {
    /// Mean of (B̃_{T−ε} − B̃_0)/√(T−ε) over paths.
    pub increment_mean: f64,
    pub increment_mean_stderr: f64,
    /// Mean over paths of Σ(ΔB̃)²/(T−ε).
    pub variance_ratio: f64,
    pub variance_ratio_stderr: f64,
    /// Fraction of pre-τ steps (with B ≠ 0) whose drift has sign −sgn(B).
    pub pre_tau_sign_agreement: f64,
    pub pass_mean: bool,
    pub pass_variance: bool,
}

/// ∫ drift(t, B_t) dt over [t0, t1] along the straight line from b0 to b1,
/// by 4-point Gauss–Legendre (interior nodes keep the integrable 1/|B|
/// singularity of the post-τ drift at a zero endpoint finite).
fn segment_integral(t0: f64, t1: f64, b0: f64, b1: f64, drift: impl Fn(f64, f64) -> f64) -> f64 {
    const NODES: [(f64, f64); 4] = [
        (-0.861_136_311_594_052_6, 0.347_854_845_137_453_9),
        (-0.339_981_043_584_856_3, 0.652_145_154_862_546_1),
        (0.339_981_043_584_856_3, 0.652_145_154_862_546_1),
        (0.861_136_311_594_052_6, 0.347_854_845_137_453_9),
    ];
    let half = 0.5 * (t1 - t0);
    NODES
        .iter()
        .map(|&(z, w)| {
            let s = 0.5 * (z + 1.0);
            w * drift(t0 + s * (t1 - t0), b0 + s * (b1 - b0))
        })
        .sum::<f64>()
        * half
}

/// Last zero of a Brownian path known on a grid of mesh `h`. Walking back
/// from T, an interval contains a zero if its endpoints differ in sign, or
/// otherwise with the bridge crossing probability exp(−2·b₀·b₁/h). Within
/// that interval τ is placed by linear interpolation of |B|.
fn last_zero_on_grid(b: &[f64], h: f64, rng: &mut ChaCha8Rng) -> f64 {
    for i in (0..b.len() - 1).rev() {
        let (l, r) = (b[i], b[i + 1]);
        let crosses = l * r <= 0.0 || rng.gen::<f64>() < (-2.0 * l * r / h).exp();
        if crosses {
            let (l, r) = (l.abs(), r.abs());
            return (i as f64 + if l + r > 0.0 { l / (l + r) } else { 0.0 }) * h;
        }
    }
    0.0
}

/// Reconstructs B̃ = B − ∫drift on [0, T−ε] from simulated Brownian paths,
/// with τ the last zero located by [`last_zero_on_grid`]. The drift is
/// integrated along the piecewise-linear path, which passes through 0 at τ.
pub fn mc_progressive_drift(cfg: &McConfig) -> Result<ProgressiveDiagnostics> {
    cfg.validate()?;
    if cfg.eps >= cfg.horizon {
        return invalid("progressive demo needs ε < T");
    }
    let (t_end, n) = (cfg.horizon, cfg.grid);
    let h = t_end / n as f64;
    let sh = h.sqrt();
    let cut = ((t_end - cfg.eps) / h).floor() as usize;
    let span = cut as f64 * h;
    let [mean, var, sign_ok, sign_total] = cfg.run(|rng| {
        let mut b = Vec::with_capacity(n + 1);
        let mut cur = 0.0;
        b.push(cur);
        for _ in 0..n {
            cur += sh * rng.sample::<f64, _>(StandardNormal);
            b.push(cur);
        }
        let tau = last_zero_on_grid(&b, h, rng);
        let bt_sign = b[n].signum();
        let (mut sum, mut sq, mut ok, mut total) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..cut {
            let (t0, t1) = (i as f64 * h, (i + 1) as f64 * h);
            let (b0, b1) = (b[i], b[i + 1]);
            let before = t0 <= tau;
            if before && b0 != 0.0 {
                total += 1.0;
                if progressive_drift(b0, t0, t_end, bt_sign, true).signum() == -b0.signum() {
                    ok += 1.0;
                }
            }
            let integral = if t1 <= tau {
                segment_integral(t0, t1, b0, b1, |t, x| progressive_drift(x, t, t_end, bt_sign, true))
            } else if t0 >= tau {
                segment_integral(t0, t1, b0, b1, |t, x| progressive_drift(x, t, t_end, bt_sign, false))
            } else {
                segment_integral(t0, tau, b0, 0.0, |t, x| progressive_drift(x, t, t_end, bt_sign, true))
                    + segment_integral(tau, t1, 0.0, b1, |t, x| progressive_drift(x, t, t_end, bt_sign, false))
            };
            let inc = b1 - b0 - integral;
            sum += inc;
            sq += inc * inc;
        }
        [sum / span.sqrt(), sq / span, ok, total]
    });
    let agreement = if sign_total.mean > 0.0 { sign_ok.mean / sign_total.mean } else { 1.0 };
    Ok(ProgressiveDiagnostics {
        increment_mean: mean.mean,
        increment_mean_stderr: mean.stderr(),
        variance_ratio: var.mean,
        variance_ratio_stderr: var.stderr(),
        pre_tau_sign_agreement: agreement,
        pass_mean: mean.mean.abs() <= 4.0 * mean.stderr(),
        pass_variance: (var.mean - 1.0).abs() <= 0.05,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BesselDiagnostics {
    /// Mean of (B̃_T − B̃_0)/√T over paths, B̃ = R − 2J.
    pub increment_mean: f64,
    pub increment_mean_stderr: f64,
    /// Mean over paths of (B̃_T − B̃_0)²/T.
    pub variance_ratio: f64,
    pub variance_ratio_stderr: f64,
    /// Mean total variation of the finite-variation part 2dJ − dt/R.
    pub mean_variation: f64,
    /// Mean fraction of that variation carried on steps with dJ > 0.
    pub fraction_on_dj: f64,
    /// Every simulated J was nondecreasing and every variation finite.
    pub j_monotone: bool,
    pub variation_finite: bool,
    /// Total number of Euler step halvings (exit from (0, ∞) or stiff steps).
    pub halvings: u64,
    pub pass_mean: bool,
}

/// Euler step of dR = dt/R + dB over [t, t+h] with Brownian increment
/// `db`. If R would leave (0, ∞), or the drift step h/R exceeds R (the
/// stiff regime next to the origin), the step is split at a Brownian-bridge
/// midpoint and retried on the halves.
fn bessel_step(r: f64, h: f64, db: f64, depth: u32, rng: &mut ChaCha8Rng, halvings: &mut u64) -> f64 {
    let next = r + h / r + db;
    let stiff = h > r * r;
    if (next > 0.0 && !stiff) || depth >= 30 {
        return if next > 0.0 { next } else { next.abs().max(f64::MIN_POSITIVE) };
    }
    *halvings += 1;
    let mid = 0.5 * db + (0.25 * h).sqrt() * rng.sample::<f64, _>(StandardNormal);
    let r_mid = bessel_step(r, 0.5 * h, mid, depth + 1, rng, halvings);
    bessel_step(r_mid, 0.5 * h, db - mid, depth + 1, rng, halvings)
}

/// Pitman's construction: R a 3-dimensional Bessel process from r0 and
/// J_t = inf_{s ≥ t} R_s its future infimum; B̃ = R − 2J is Brownian in the
/// filtration enlarged by J. The infimum beyond the horizon is sampled
/// exactly as R_T·U with U uniform on (0, 1); the infimum inside each grid
/// interval is sampled from the Brownian-bridge minimum law.
pub fn mc_bessel_demo(cfg: &McConfig, r0: f64) -> Result<BesselDiagnostics> {
    cfg.validate()?;
    if !(r0 > 0.0 && r0.is_finite()) {
        return invalid(format!("Bessel start must be positive, got {r0}"));
    }
    let (t_end, n) = (cfg.horizon, cfg.grid);
    let h = t_end / n as f64;
    let sh = h.sqrt();
    let [inc, sq, variation, fraction, monotone, finite, halvings] = cfg.run(|rng| {
        let mut r = Vec::with_capacity(n + 1);
        r.push(r0);
        let mut halvings = 0u64;
        for i in 0..n {
            let db = sh * rng.sample::<f64, _>(StandardNormal);
            r.push(bessel_step(r[i], h, db, 0, rng, &mut halvings));
        }
        let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let mut j = vec![0.0; n + 1];
        j[n] = r[n] * u;
        for i in (0..n).rev() {
            // Minimum between grid points, sampled as for a Brownian bridge.
            let (a, c) = (r[i], r[i + 1]);
            let v: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let bridge_min = 0.5 * (a + c - ((a - c).powi(2) - 2.0 * h * v.ln()).sqrt());
            j[i] = a.min(bridge_min.max(0.0)).min(j[i + 1]);
        }
        let monotone = j.windows(2).all(|w| w[1] >= w[0]);
        let (mut v, mut v_dj) = (0.0, 0.0);
        for i in 0..n {
            let dj = j[i + 1] - j[i];
            let piece = (2.0 * dj - h / r[i]).abs();
            v += piece;
            if dj > 0.0 {
                v_dj += piece;
            }
        }
        let d = ((r[n] - 2.0 * j[n]) - (r[0] - 2.0 * j[0])) / t_end.sqrt();
        [
            d,
            d * d,
            v,
            if v > 0.0 { v_dj / v } else { 0.0 },
            f64::from(u8::from(monotone)),
            f64::from(u8::from(v.is_finite())),
            halvings as f64,
        ]
    });
    Ok(BesselDiagnostics {
        increment_mean: inc.mean,
        increment_mean_stderr: inc.stderr(),
        variance_ratio: sq.mean,
        variance_ratio_stderr: sq.stderr(),
        mean_variation: variation.mean,
        fraction_on_dj: fraction.mean,
        j_monotone: monotone.mean == 1.0,
        variation_finite: finite.mean == 1.0,
        halvings: (halvings.mean * halvings.n as f64).round() as u64,
        pass_mean: inc.mean.abs() <= 4.0 * inc.stderr(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moments_merge_matches_single_pass() {
        let xs: Vec<f64> = (0..100).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut all = Moments::default();
        xs.iter().for_each(|&x| all.push(x));
        let (mut a, mut b) = (Moments::default(), Moments::default());
        xs[..37].iter().for_each(|&x| a.push(x));
        xs[37..].iter().for_each(|&x| b.push(x));
        a.merge(&b);
        assert!((a.mean - all.mean).abs() < 1e-14);
        assert!((a.variance() - all.variance()).abs() < 1e-14);
    }

    #[test]
    fn tail_and_complement_sum_to_one() {
        for x in [0.0, 1e-8, 0.3, 2.0, 7.5] {
            assert!((phi_tail(x) + one_minus_phi_tail(x) - 1.0).abs() < 1e-15);
        }
    }
}
