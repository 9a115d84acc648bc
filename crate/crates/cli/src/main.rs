//! `causalot` — file-driven experiments on scenario trees.
//!
//! Every command writes one JSON result (atomically) and prints a one-line
//! summary. Exit codes: 0 success, 1 invalid input or usage, 2 numerical
//! failure (non-optimal LP, failed Monte Carlo gate or violated bound).

mod files;
mod report;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use causalot::causal::{drift_field, lp_dual_certificate, solve_transport, Mode, SolveOptions, CERT_TOL};
use causalot::costs::{CostConfig, CostSpec, Rho};
use causalot::enlargement::{
    drift_energy, kl_information, mc_bessel_demo, mc_bridge_energy, mc_progressive_drift, partition_entropy, McConfig,
};
use causalot::lp::Backend;
use causalot::pathspace::{
    build_binomial, build_binomial_p, enlarge_initial, natural_filtration, AtomLabeling, Edge, ScenarioTree,
};
use causalot::stopping::{self, model_sensitivity_stopping, optimal_stopping, rst_lp_value, value_of_info_stopping};
use causalot::utility::{self, info_value_vs_entropy, log_utility_value, value_of_info_utility, UtilitySpec};
use causalot::{Error, Result};
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use files::{
    output_path, read_cost_matrix, read_filtration, read_json, read_market, read_tree, write_json, LabelsFile,
    PayoffFile,
};

/// Entries below this mass are dropped from the sparse coupling output.
const COUPLING_THRESHOLD: f64 = 1e-12;
/// Slack for the sandwich checks of the convergence study.
const SANDWICH_TOL: f64 = 1e-9;

#[derive(Debug, Parser)]
#[command(
    name = "causalot",
    version,
    about = "Causal optimal transport, filtration enlargement and value-of-information experiments",
    after_help = "Relative --out paths (and default output names) resolve against $CAUSALOT_OUT_DIR when it is set.\n\
                  --config <json> reads an object of flag values, e.g. {\"paths\": 20000, \"seed\": 7}, which override \
                  the command line."
)]
struct Cli {
    /// JSON object of flag values; overrides flags given on the command line.
    #[arg(long, global = true, value_name = "JSON")]
    config: Option<PathBuf>,

    /// Output file (JSON, or CSV for `report`).
    #[arg(long, global = true, value_name = "FILE")]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build a binomial scenario tree.
    Tree(TreeArgs),
    /// Solve a classical, causal or bicausal transport problem.
    Solve(SolveArgs),
    /// Information measures of filtration enlargements.
    Info {
        #[command(subcommand)]
        what: InfoCommand,
    },
    /// Monte Carlo checks of continuous-time enlargement formulas.
    Mc(McArgs),
    /// Optimal stopping values and information bounds.
    Stopping(StoppingArgs),
    /// Log-utility values and information bounds.
    Utility(UtilityArgs),
    /// Consolidate a directory of results into CSV and gnuplot data files.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct TreeArgs {
    /// Number of steps N (the tree has 2^N leaves).
    #[arg(long, value_name = "N")]
    binomial: usize,
    /// Horizon T; increments are ±√(T/N).
    #[arg(long = "T", default_value_t = 1.0)]
    horizon: f64,
    /// Up-move probability.
    #[arg(long, default_value_t = 0.5)]
    p: f64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Causal,
    Bicausal,
    Classical,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum CostArg {
    /// Total variation of the increment difference.
    Tv,
    /// Cameron–Martin cost with ρ(x) = |x|^p / p.
    Cm,
    /// Uniform distance between paths.
    Sup,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum BackendArg {
    Auto,
    Dense,
    Sparse,
}

#[derive(Debug, Args)]
struct SolveArgs {
    #[arg(long, value_enum, default_value_t = ModeArg::Causal)]
    mode: ModeArg,
    #[arg(long, value_enum, default_value_t = CostArg::Cm)]
    cost: CostArg,
    /// Exponent of ρ for the Cameron–Martin cost.
    #[arg(long, default_value_t = 2.0)]
    p: f64,
    /// CSV cost matrix (source leaves × target leaves); replaces --cost.
    #[arg(long = "cost-matrix", value_name = "CSV")]
    cost_matrix: Option<PathBuf>,
    #[arg(long = "treeX", value_name = "FILE")]
    tree_x: PathBuf,
    #[arg(long = "treeY", value_name = "FILE")]
    tree_y: PathBuf,
    /// Source filtration (default: natural).
    #[arg(long = "filtF", value_name = "FILE")]
    filt_f: Option<PathBuf>,
    /// Target filtration (default: natural).
    #[arg(long = "filtG", value_name = "FILE")]
    filt_g: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = BackendArg::Auto)]
    backend: BackendArg,
}

#[derive(Debug, Subcommand)]
enum InfoCommand {
    /// Entropy −Σ p ln p of a labeling (uniform leaf weights without --tree).
    Entropy {
        #[arg(long, value_name = "FILE")]
        labels: PathBuf,
        #[arg(long, value_name = "FILE")]
        tree: Option<PathBuf>,
    },
    /// Summed conditional KL divergence of increments under G against F.
    Kl {
        #[arg(long, value_name = "FILE")]
        tree: PathBuf,
        /// Enlarged filtration G.
        #[arg(long, value_name = "FILE")]
        filt: PathBuf,
        /// Base filtration F (default: natural).
        #[arg(long = "filtF", value_name = "FILE")]
        filt_f: Option<PathBuf>,
    },
    /// Energy E[Σ ρ(α)·dt] of the discrete information drift.
    DriftEnergy {
        #[arg(long, value_name = "FILE")]
        tree: PathBuf,
        #[arg(long, value_name = "FILE")]
        filt: PathBuf,
        #[arg(long, default_value_t = 2.0)]
        p: f64,
    },
    /// Drift energy, KL information and entropy of sign(ω_N) for a range of N.
    Convergence {
        #[arg(long, default_value_t = 2)]
        nmin: usize,
        #[arg(long, default_value_t = 10)]
        nmax: usize,
        #[arg(long = "T", default_value_t = 1.0)]
        horizon: f64,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum McKind {
    /// Truncated energy of the Brownian-bridge drift against ½ ln(T/ε).
    Bridge,
    /// Brownian motion enlarged by its last zero.
    Progressive,
    /// Pitman's construction for the 3-dimensional Bessel process.
    Bessel,
}

#[derive(Debug, Args)]
struct McArgs {
    #[arg(value_enum)]
    kind: McKind,
    #[arg(long, default_value_t = 10_000)]
    paths: usize,
    #[arg(long, default_value_t = 1000)]
    grid: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long = "T", default_value_t = 1.0)]
    horizon: f64,
    /// Truncation ε before the horizon.
    #[arg(long, default_value_t = 0.01)]
    eps: f64,
    /// Starting point of the Bessel process.
    #[arg(long, default_value_t = 0.1)]
    r0: f64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum StoppingKind {
    /// Optimal stopping value under --filt.
    Value,
    /// Value of the information --filt over --filtF, with its transport bound.
    Bound,
    /// Sensitivity of the value to the measure (--tree against --treeNu).
    Sensitivity,
}

#[derive(Debug, Args)]
struct StoppingArgs {
    #[arg(value_enum)]
    kind: StoppingKind,
    #[arg(long, value_name = "FILE")]
    tree: PathBuf,
    /// Stopping filtration (default: natural).
    #[arg(long, value_name = "FILE")]
    filt: Option<PathBuf>,
    /// Base filtration for `bound` (default: natural).
    #[arg(long = "filtF", value_name = "FILE")]
    filt_f: Option<PathBuf>,
    /// Payoff JSON: {"builtin": name, "K": k} or {"table": [...], "K": k}.
    #[arg(long, value_name = "FILE")]
    payoff: PathBuf,
    /// Second measure on the same skeleton, for `sensitivity`.
    #[arg(long = "treeNu", value_name = "FILE")]
    tree_nu: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum UtilityKind {
    /// Optimal expected log-utility under --filt.
    Value,
    /// Value of the information --filt over the natural filtration.
    Bound,
    /// Utility gain of an initial enlargement beside drift energy and entropy.
    EntropyCompare,
}

#[derive(Debug, Args)]
struct UtilityArgs {
    #[arg(value_enum)]
    kind: UtilityKind,
    #[arg(long, value_name = "FILE")]
    tree: PathBuf,
    /// Investor filtration (default: natural).
    #[arg(long, value_name = "FILE")]
    filt: Option<PathBuf>,
    /// Market JSON: {"b_bar", "sigma", "s0", "T"} (optional "b" for a constant drift).
    #[arg(long, value_name = "FILE")]
    market: PathBuf,
    /// Labels of the initial enlargement, for `entropy-compare`.
    #[arg(long, value_name = "FILE")]
    labels: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Directory of JSON results.
    #[arg(long, value_name = "DIR")]
    dir: PathBuf,
}

/// A finished command: the JSON record, a summary line, and whether every
/// numerical check passed.
struct Outcome {
    record: Value,
    summary: String,
    ok: bool,
}

/// Common shape of every result: name, N, value, optional bound with
/// gap = |bound − value|, optional pass flag, and command-specific detail.
fn record(name: &str, steps: Option<usize>, value: f64, bound: Option<f64>, pass: Option<bool>, detail: Value) -> Value {
    json!({
        "name": name,
        "N": steps,
        "value": value,
        "bound": bound,
        "gap": bound.map(|b| (b - value).abs()),
        "pass": pass,
        "detail": detail,
    })
}

fn with_tolerance(mut record: Value, tol: f64) -> Value {
    record["tolerance"] = json!(tol);
    record
}

fn cmd_tree(a: &TreeArgs) -> Result<(ScenarioTree, Outcome)> {
    let tree = if a.p == 0.5 { build_binomial(a.binomial, a.horizon)? } else { build_binomial_p(a.binomial, a.horizon, a.p)? };
    let summary = format!("tree: N = {}, {} leaves, dt = {}", tree.steps(), tree.n_leaves(), tree.dt());
    Ok((tree, Outcome { record: Value::Null, summary, ok: true }))
}

fn cmd_solve(a: &SolveArgs) -> Result<Outcome> {
    let tx = read_tree(&a.tree_x)?;
    let ty = read_tree(&a.tree_y)?;
    let f = read_filtration(a.filt_f.as_deref(), &tx)?;
    let g = read_filtration(a.filt_g.as_deref(), &ty)?;
    let cost = match &a.cost_matrix {
        Some(path) => CostSpec::Explicit(read_cost_matrix(path)?),
        None => {
            let name = match a.cost {
                CostArg::Tv => "tv",
                CostArg::Cm => "cm",
                CostArg::Sup => "sup",
            };
            CostConfig { cost: name.into(), p: Some(a.p) }.to_spec()?
        }
    };
    let mode = match a.mode {
        ModeArg::Causal => Mode::Causal,
        ModeArg::Bicausal => Mode::Bicausal,
        ModeArg::Classical => Mode::Classical,
    };
    let backend = match a.backend {
        BackendArg::Auto => Backend::Auto,
        BackendArg::Dense => Backend::Dense,
        BackendArg::Sparse => Backend::Sparse,
    };
    let sol = solve_transport(&tx, &f, &ty, &g, &cost, mode, SolveOptions { backend })?;
    let gap = sol.lp.duality_gap();
    let certificate = if sol.lp.duals.is_some() { Some(lp_dual_certificate(&sol)?) } else { None };
    let triples: Vec<Value> = sol
        .coupling
        .sparse_triples(COUPLING_THRESHOLD)
        .into_iter()
        .map(|(x, y, m)| json!([x, y, m]))
        .collect();
    let detail = json!({
        "mode": mode,
        "status": sol.lp.status.name(),
        "dual_value": gap.map(|_| sol.lp.dual_value),
        "duality_gap": gap,
        "certificate_residual": certificate.as_ref().map(|c| c.inequality_residual.max(c.value_residual)),
        "causality_residual": sol.coupling.causality_residual,
        "marginal_residual": sol.coupling.marginal_residual,
        "backend": if sol.lp.used_sparse { "sparse" } else { "dense" },
        "iterations": sol.lp.iterations,
        "coupling": triples,
    });
    let summary = match gap {
        Some(gap) => format!("solve: {:?} value = {:.10}, duality gap = {gap:.2e}", mode, sol.value),
        None => format!("solve: {:?} value = {:.10} (sparse backend, no duals)", mode, sol.value),
    };
    let steps = tx.steps().max(ty.steps());
    let name = format!("solve-{}", serde_json::to_value(mode)?.as_str().unwrap_or("transport"));
    // The solve fields sit at the top level; "bound" is the dual value.
    let mut rec = record(&name, Some(steps), sol.value, gap.map(|_| sol.lp.dual_value), None, Value::Null);
    if let (Value::Object(rec), Value::Object(detail)) = (&mut rec, detail) {
        rec.remove("detail");
        rec.extend(detail);
        rec.insert("tolerance".into(), json!(CERT_TOL));
    }
    Ok(Outcome { record: rec, summary, ok: true })
}

/// Uniform one-step tree with one leaf per label, so a bare labels file can
/// be read as a labeling with equal weights.
fn uniform_tree(n: usize) -> Result<ScenarioTree> {
    let edges: Vec<Edge> =
        (0..n).map(|i| Edge { parent: 0, child: i + 1, incr: i as f64, prob: 1.0 / n as f64 }).collect();
    ScenarioTree::from_edges(1, 1.0, &edges)
}

fn cmd_info(what: &InfoCommand) -> Result<Outcome> {
    match what {
        InfoCommand::Entropy { labels, tree } => {
            let file: LabelsFile = read_json(labels)?;
            let (tree, steps) = match (tree, &file) {
                (Some(path), _) => {
                    let t = read_tree(path)?;
                    let n = t.steps();
                    (t, Some(n))
                }
                (None, LabelsFile::Explicit { labels }) => (uniform_tree(labels.len())?, None),
                (None, LabelsFile::Builtin { .. }) => {
                    return Err(Error::Invalid("builtin labelings need --tree".into()));
                }
            };
            let labeling = file.resolve(&tree)?;
            let h = partition_entropy(&labeling);
            let detail = json!({ "classes": labeling.n_classes(), "probs": labeling.probs() });
            Ok(Outcome {
                record: record("info-entropy", steps, h, None, None, detail),
                summary: format!("entropy = {h:.6}"),
                ok: true,
            })
        }
        InfoCommand::Kl { tree, filt, filt_f } => {
            let t = read_tree(tree)?;
            let f = read_filtration(filt_f.as_deref(), &t)?;
            let g = read_filtration(Some(filt), &t)?;
            let kl = kl_information(&t, &f, &g)?;
            let detail = json!({ "infinite": kl.is_infinite() });
            Ok(Outcome {
                record: record("info-kl", Some(t.steps()), kl, None, None, detail),
                summary: format!("kl information = {kl:.6}"),
                ok: true,
            })
        }
        InfoCommand::DriftEnergy { tree, filt, p } => {
            let t = read_tree(tree)?;
            let g = read_filtration(Some(filt), &t)?;
            let drift = drift_field(&t, &natural_filtration(&t), &g)?;
            let e = drift_energy(&drift, Rho::power(*p)?);
            let detail = json!({ "p": p, "skipped_atoms": drift.skipped });
            Ok(Outcome {
                record: record("info-drift-energy", Some(t.steps()), e, None, None, detail),
                summary: format!("drift energy = {e:.6}"),
                ok: true,
            })
        }
        InfoCommand::Convergence { nmin, nmax, horizon } => {
            if nmin > nmax || *nmin == 0 {
                return Err(Error::Invalid(format!("need 1 ≤ nmin ≤ nmax, got {nmin}..{nmax}")));
            }
            let mut rows = Vec::new();
            let mut all = true;
            for n in *nmin..=*nmax {
                let t = build_binomial(n, *horizon)?;
                let f = natural_filtration(&t);
                let labels = AtomLabeling::sign_terminal(&t);
                let g = enlarge_initial(&f, &labels)?;
                let energy = drift_energy(&drift_field(&t, &f, &g)?, Rho::Quadratic);
                let kl = kl_information(&t, &f, &g)?;
                let entropy = partition_entropy(&labels);
                let pass = energy <= kl + SANDWICH_TOL && kl <= entropy + SANDWICH_TOL;
                all &= pass;
                rows.push(json!({
                    "N": n,
                    "value": energy,
                    "bound": kl,
                    "gap": (kl - energy).abs(),
                    "pass": pass,
                    "drift_energy": energy,
                    "kl_information": kl,
                    "entropy": entropy,
                }));
            }
            let record = json!({
                "name": "convergence",
                "tolerance": SANDWICH_TOL,
                "labeling": "sign_terminal",
                "T": horizon,
                "pass": all,
                "rows": rows,
            });
            Ok(Outcome {
                record,
                summary: format!("convergence: N = {nmin}..{nmax}, drift energy ≤ KL ≤ entropy: {all}"),
                ok: all,
            })
        }
    }
}

fn cmd_mc(a: &McArgs) -> Result<Outcome> {
    let cfg = McConfig { paths: a.paths, grid: a.grid, seed: a.seed, horizon: a.horizon, eps: a.eps };
    let params = json!({ "paths": a.paths, "grid": a.grid, "seed": a.seed, "T": a.horizon, "eps": a.eps });
    let (record, summary, ok) = match a.kind {
        McKind::Bridge => {
            let est = mc_bridge_energy(&cfg)?;
            let detail = json!({ "estimate": est, "params": params });
            let mut r = record("mc-bridge", None, est.estimate, Some(est.target), Some(est.pass), detail);
            r["estimate"] = json!(est.estimate);
            r["stderr"] = json!(est.stderr);
            r["target"] = json!(est.target);
            let s = format!("bridge energy = {:.5} ± {:.5} (target {:.5})", est.estimate, est.stderr, est.target);
            (r, s, est.pass)
        }
        McKind::Progressive => {
            let d = mc_progressive_drift(&cfg)?;
            let pass = d.pass_mean && d.pass_variance;
            let detail = json!({ "diagnostics": d, "params": params });
            let mut r = record("mc-progressive", None, d.increment_mean, Some(0.0), Some(pass), detail);
            r["estimate"] = json!(d.increment_mean);
            r["stderr"] = json!(d.increment_mean_stderr);
            r["target"] = json!(0.0);
            let s = format!(
                "progressive: increment mean = {:.5} ± {:.5}, variance ratio = {:.5} ± {:.5}",
                d.increment_mean, d.increment_mean_stderr, d.variance_ratio, d.variance_ratio_stderr
            );
            (r, s, pass)
        }
        McKind::Bessel => {
            let d = mc_bessel_demo(&cfg, a.r0)?;
            let pass = d.pass_mean && d.j_monotone && d.variation_finite;
            let detail = json!({ "diagnostics": d, "params": params, "r0": a.r0 });
            let mut r = record("mc-bessel", None, d.increment_mean, Some(0.0), Some(pass), detail);
            r["estimate"] = json!(d.increment_mean);
            r["stderr"] = json!(d.increment_mean_stderr);
            r["target"] = json!(0.0);
            let s = format!(
                "bessel: increment mean = {:.5} ± {:.5}, fraction of variation on dJ > 0 = {:.4}",
                d.increment_mean, d.increment_mean_stderr, d.fraction_on_dj
            );
            (r, s, pass)
        }
    };
    Ok(Outcome { record, summary, ok })
}

fn cmd_stopping(a: &StoppingArgs) -> Result<Outcome> {
    let tree = read_tree(&a.tree)?;
    let payoff = read_json::<PayoffFile>(&a.payoff)?.resolve()?;
    let steps = Some(tree.steps());
    match a.kind {
        StoppingKind::Value => {
            let h = read_filtration(a.filt.as_deref(), &tree)?;
            let sol = optimal_stopping(&tree, &h, &payoff)?;
            let lp = rst_lp_value(&tree, &h, &payoff)?;
            let detail = json!({ "lp_value": lp, "lp_difference": (lp - sol.value).abs(), "stop": sol.stop });
            Ok(Outcome {
                record: record("stopping-value", steps, sol.value, None, None, detail),
                summary: format!("stopping value = {:.10} (randomised LP {:.10})", sol.value, lp),
                ok: true,
            })
        }
        StoppingKind::Bound => {
            let f = read_filtration(a.filt_f.as_deref(), &tree)?;
            let g = read_filtration(a.filt.as_deref(), &tree)?;
            let rep = value_of_info_stopping(&tree, &f, &g, &payoff)?;
            Ok(Outcome {
                record: with_tolerance(
                    record("stopping-bound", steps, rep.gap, Some(rep.bound), Some(rep.holds), json!(rep)),
                    stopping::BOUND_SLACK,
                ),
                summary: format!("stopping: v^F − v^G = {:.6} ≤ K·W = {:.6}: {}", rep.gap, rep.bound, rep.holds),
                ok: rep.holds,
            })
        }
        StoppingKind::Sensitivity => {
            let nu_path = a.tree_nu.as_deref().ok_or_else(|| Error::Invalid("sensitivity needs --treeNu".into()))?;
            let nu = read_tree(nu_path)?;
            let rep = model_sensitivity_stopping(&tree, &nu, &payoff)?;
            Ok(Outcome {
                record: with_tolerance(
                    record("stopping-sensitivity", steps, rep.difference, Some(rep.bound), Some(rep.holds), json!(rep)),
                    stopping::BOUND_SLACK,
                ),
                summary: format!(
                    "stopping: |v^μ − v^ν| = {:.6} ≤ K·AW = {:.6}: {}",
                    rep.difference, rep.bound, rep.holds
                ),
                ok: rep.holds,
            })
        }
    }
}

fn cmd_utility(a: &UtilityArgs) -> Result<Outcome> {
    let tree = read_tree(&a.tree)?;
    let market = read_market(&a.market)?;
    let steps = Some(tree.steps());
    match a.kind {
        UtilityKind::Value => {
            let h = read_filtration(a.filt.as_deref(), &tree)?;
            let sol = log_utility_value(&tree, &h, &market)?;
            Ok(Outcome {
                record: record("utility-value", steps, sol.value, None, None, json!({ "policy": sol.policy })),
                summary: format!("log-utility value = {:.10}", sol.value),
                ok: true,
            })
        }
        UtilityKind::Bound => {
            let f = natural_filtration(&tree);
            let g = read_filtration(a.filt.as_deref(), &tree)?;
            let rep = value_of_info_utility(&tree, &f, &g, &market, UtilitySpec::Log)?;
            Ok(Outcome {
                record: with_tolerance(
                    record("utility-bound", steps, rep.gap, Some(rep.bound), Some(rep.holds), json!(rep)),
                    utility::BOUND_SLACK,
                ),
                summary: format!("utility: v^G − v^F = {:.6} ≤ K̃·W = {:.6}: {}", rep.gap, rep.bound, rep.holds),
                ok: rep.holds,
            })
        }
        UtilityKind::EntropyCompare => {
            let labels = match &a.labels {
                Some(path) => read_json::<LabelsFile>(path)?.resolve(&tree)?,
                None => AtomLabeling::sign_terminal(&tree),
            };
            let cmp = info_value_vs_entropy(&tree, &labels, &market)?;
            Ok(Outcome {
                record: record("utility-entropy-compare", steps, cmp.utility_gap, Some(cmp.entropy), None, json!(cmp)),
                summary: format!(
                    "utility gap = {:.6}, drift energy = {:.6}, KL = {:.6}, entropy = {:.6}",
                    cmp.utility_gap, cmp.drift_energy, cmp.kl_information, cmp.entropy
                ),
                ok: true,
            })
        }
    }
}

fn run(cli: &Cli) -> Result<bool> {
    let out = cli.out.as_deref();
    let (outcome, path) = match &cli.command {
        Command::Tree(a) => {
            let (tree, outcome) = cmd_tree(a)?;
            let path = output_path(out, "tree.json");
            write_json(&path, &tree.to_file())?;
            println!("{} -> {}", outcome.summary, path.display());
            return Ok(true);
        }
        Command::Report(a) => {
            let path = output_path(out, "report.csv");
            let summary = report::write_report(&a.dir, &path)?;
            println!("{summary} -> {}", path.display());
            return Ok(true);
        }
        Command::Solve(a) => (cmd_solve(a)?, "solve.json"),
        Command::Info { what } => {
            let name = match what {
                InfoCommand::Entropy { .. } => "info-entropy.json",
                InfoCommand::Kl { .. } => "info-kl.json",
                InfoCommand::DriftEnergy { .. } => "info-drift-energy.json",
                InfoCommand::Convergence { .. } => "convergence.json",
            };
            (cmd_info(what)?, name)
        }
        Command::Mc(a) => (cmd_mc(a)?, "mc.json"),
        Command::Stopping(a) => (cmd_stopping(a)?, "stopping.json"),
        Command::Utility(a) => (cmd_utility(a)?, "utility.json"),
    };
    let path = output_path(out, path);
    write_json(&path, &outcome.record)?;
    println!("{} -> {}", outcome.summary, path.display());
    Ok(outcome.ok)
}

/// Validation problems exit 1; numerical failures exit 2.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::LpStatus(_) | Error::Consistency(_) => 2,
        _ => 1,
    }
}

/// Appends the flags of a `--config` JSON object after the command line,
/// so that (with later occurrences winning) the file overrides it.
fn expand_config(mut argv: Vec<OsString>) -> Result<Vec<OsString>> {
    let mut config = None;
    for (i, arg) in argv.iter().enumerate() {
        let s = arg.to_string_lossy();
        if let Some(v) = s.strip_prefix("--config=") {
            config = Some(PathBuf::from(v));
        } else if s == "--config" {
            config = argv.get(i + 1).map(PathBuf::from);
        }
    }
    let Some(path) = config else { return Ok(argv) };
    let value: Value = read_json(&path)?;
    let Value::Object(map) = value else {
        return Err(Error::Invalid(format!("{}: config must be a JSON object", path.display())));
    };
    for (key, v) in map {
        let flag = OsString::from(format!("--{key}"));
        match v {
            Value::Null | Value::Bool(false) => {}
            Value::Bool(true) => argv.push(flag),
            Value::String(s) => argv.extend([flag, s.into()]),
            Value::Number(n) => argv.extend([flag, n.to_string().into()]),
            other => return Err(Error::Invalid(format!("config key '{key}': unsupported value {other}"))),
        }
    }
    Ok(argv)
}

fn command() -> clap::Command {
    fn override_self(cmd: clap::Command) -> clap::Command {
        cmd.args_override_self(true).mut_subcommands(override_self)
    }
    override_self(Cli::command())
}

fn main() -> ExitCode {
    let argv = match expand_config(std::env::args_os().collect()) {
        Ok(argv) => argv,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let cli = match command().try_get_matches_from(argv).and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
