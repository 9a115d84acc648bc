use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn causalot(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_causalot"))
        .args(args)
        .current_dir(dir)
        .env_remove("CAUSALOT_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn read(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn setup() -> TempDir {
    let dir = TempDir::new().unwrap();
    let out = causalot(dir.path(), &["tree", "--binomial", "4", "--T", "1", "--out", "t.json"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    fs::write(dir.path().join("g.json"), r#"{"kind": "initial", "builtin": "sign_terminal"}"#).unwrap();
    dir
}

#[test]
fn tree_has_sixteen_leaves() {
    let dir = setup();
    let tree = read(&dir.path().join("t.json"));
    let edges = tree["edges"].as_array().unwrap();
    let parents: std::collections::HashSet<u64> = edges.iter().map(|e| e["parent"].as_u64().unwrap()).collect();
    let leaves = edges.iter().filter(|e| !parents.contains(&e["child"].as_u64().unwrap())).count();
    assert_eq!(leaves, 16);
    assert_eq!(tree["steps"], 4);
}

#[test]
fn causal_solve_closes_the_duality_gap() {
    let dir = setup();
    let args = [
        "solve", "--mode", "causal", "--cost", "cm", "--p", "2", "--treeX", "t.json", "--treeY", "t.json", "--filtG",
        "g.json", "--out", "s.json",
    ];
    let out = causalot(dir.path(), &args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let r = read(&dir.path().join("s.json"));
    assert_eq!(r["status"], "optimal");
    assert!(r["duality_gap"].as_f64().unwrap() <= 1e-8);
    assert!(r["causality_residual"].as_f64().unwrap() <= 1e-8);
    // Binomial closed form 2·Σ ν(g)|p − ½| for sign(ω_4) is 3/2.
    assert!((r["value"].as_f64().unwrap() - 1.5).abs() <= 1e-9);
    let mass: f64 = r["coupling"].as_array().unwrap().iter().map(|t| t[2].as_f64().unwrap()).sum();
    assert!((mass - 1.0).abs() <= 1e-9);
}

#[test]
fn entropy_of_a_half_split_is_ln_2() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("half.json"), r#"{"labels": [0, 0, 1, 1]}"#).unwrap();
    let out = causalot(dir.path(), &["info", "entropy", "--labels", "half.json", "--out", "e.json"]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("0.693147"));
    let v = read(&dir.path().join("e.json"))["value"].as_f64().unwrap();
    assert!((v - std::f64::consts::LN_2).abs() <= 1e-15);
}

#[test]
fn empty_directory_gives_header_only_report() {
    let dir = TempDir::new().unwrap();
    fs::create_dir(dir.path().join("results")).unwrap();
    let out = causalot(dir.path(), &["report", "--dir", "results", "--out", "report.csv"]);
    assert_eq!(code(&out), 0);
    assert_eq!(fs::read_to_string(dir.path().join("report.csv")).unwrap(), "name,N,value,bound,gap,pass\n");
}

#[test]
fn report_skips_malformed_files_and_expands_studies() {
    let dir = TempDir::new().unwrap();
    let res = dir.path().join("results");
    fs::create_dir(&res).unwrap();
    fs::write(res.join("broken.json"), "{ not json").unwrap();
    let out = causalot(dir.path(), &["info", "convergence", "--nmin", "2", "--nmax", "10", "--out", "results/conv.json"]);
    assert_eq!(code(&out), 0);
    let out = causalot(dir.path(), &["report", "--dir", "results", "--out", "report.csv"]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stderr).contains("broken.json"));
    let csv = fs::read_to_string(dir.path().join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 9);
    assert!(dir.path().join("conv.dat").exists());

    // KL information equals the entropy of sign(ω_N) and dominates the
    // drift energy; on odd N the entropy is exactly ln 2.
    let study = read(&res.join("conv.json"));
    for row in study["rows"].as_array().unwrap() {
        let n = row["N"].as_u64().unwrap();
        let (e, kl, h) =
            (row["drift_energy"].as_f64().unwrap(), row["kl_information"].as_f64().unwrap(), row["entropy"].as_f64().unwrap());
        assert!(e <= kl + 1e-12 && (kl - h).abs() <= 1e-12, "N = {n}");
        if n % 2 == 1 {
            assert!((kl - std::f64::consts::LN_2).abs() <= 1e-12, "N = {n}");
        }
    }
}

#[test]
fn same_seed_gives_byte_identical_outputs() {
    let dir = TempDir::new().unwrap();
    let res = dir.path().join("results");
    let run = |file: &str| {
        let args = ["mc", "bridge", "--paths", "2000", "--grid", "100", "--seed", "7", "--eps", "0.1", "--out", file];
        assert_eq!(code(&causalot(dir.path(), &args)), 0);
    };
    run("results/a.json");
    run("results/b.json");
    assert_eq!(fs::read(res.join("a.json")).unwrap(), fs::read(res.join("b.json")).unwrap());
    causalot(dir.path(), &["report", "--dir", "results", "--out", "r1.csv"]);
    causalot(dir.path(), &["report", "--dir", "results", "--out", "r2.csv"]);
    let r1 = fs::read(dir.path().join("r1.csv")).unwrap();
    assert_eq!(r1, fs::read(dir.path().join("r2.csv")).unwrap());
    assert_eq!(String::from_utf8(r1).unwrap().lines().count(), 3);
}

#[test]
fn exit_codes_follow_the_contract() {
    let dir = setup();
    assert_eq!(code(&causalot(dir.path(), &["frobnicate"])), 1);
    assert_eq!(code(&causalot(dir.path(), &["tree", "--binomial", "2", "--bogus"])), 1);
    assert_eq!(code(&causalot(dir.path(), &["--help"])), 0);
    // Missing input file: validation error.
    assert_eq!(code(&causalot(dir.path(), &["solve", "--treeX", "none.json", "--treeY", "t.json"])), 1);
    // A one-step grid cannot resolve the bridge drift: the MC gate fails.
    let args = ["mc", "bridge", "--paths", "2000", "--grid", "1", "--eps", "0.001", "--out", "m.json"];
    assert_eq!(code(&causalot(dir.path(), &args)), 2);
    assert_eq!(read(&dir.path().join("m.json"))["pass"], false);
}

#[test]
fn config_file_overrides_flags_and_out_dir_env_is_honoured() {
    let dir = setup();
    fs::write(dir.path().join("cfg.json"), r#"{"paths": 3000, "seed": 5}"#).unwrap();
    let out_dir = dir.path().join("outputs");
    let out = Command::new(env!("CARGO_BIN_EXE_causalot"))
        .args(["mc", "bridge", "--paths", "1000", "--grid", "100", "--eps", "0.1", "--config", "cfg.json"])
        .current_dir(dir.path())
        .env("CAUSALOT_OUT_DIR", &out_dir)
        .output()
        .unwrap();
    assert_eq!(code(&out), 0);
    let r = read(&out_dir.join("mc.json"));
    assert_eq!(r["detail"]["params"]["paths"], 3000);
    assert_eq!(r["detail"]["params"]["seed"], 5);
    assert!(r["stderr"].as_f64().unwrap() > 0.0);
}

#[test]
fn stopping_and_utility_bounds_hold() {
    let dir = setup();
    fs::write(dir.path().join("pay.json"), r#"{"builtin": "neg_running_max"}"#).unwrap();
    fs::write(dir.path().join("m.json"), r#"{"b_bar": 0.3, "sigma": 0.3, "s0": 1, "T": 1}"#).unwrap();
    let runs: [&[&str]; 3] = [
        &["stopping", "bound", "--tree", "t.json", "--filt", "g.json", "--payoff", "pay.json", "--out", "s.json"],
        &["utility", "bound", "--tree", "t.json", "--filt", "g.json", "--market", "m.json", "--out", "u.json"],
        &["utility", "entropy-compare", "--tree", "t.json", "--market", "m.json", "--out", "c.json"],
    ];
    for args in runs {
        let out = causalot(dir.path(), args);
        assert_eq!(code(&out), 0, "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    for f in ["s.json", "u.json"] {
        let r = read(&dir.path().join(f));
        assert_eq!(r["pass"], true);
        assert!(r["value"].as_f64().unwrap() <= r["bound"].as_f64().unwrap() + 1e-9);
    }
    let c = read(&dir.path().join("c.json"));
    assert!(c["detail"]["drift_energy"].as_f64().unwrap() <= c["detail"]["kl_information"].as_f64().unwrap() + 1e-12);
}
