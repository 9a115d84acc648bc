//! Input file formats and atomic output.

use std::fs;
use std::path::{Path, PathBuf};

use causalot::costs::ExplicitMatrix;
use causalot::pathspace::{
    enlarge_initial, enlarge_progressive, last_zero_time, natural_filtration, AtomLabeling, FiltrationKind,
    FiltrationSeq, Partition, ScenarioTree, TreeFile,
};
use causalot::stopping::{Payoff, PayoffSpec, TableEntry};
use causalot::utility::{MarketConfig, MarketSpec};
use causalot::{Error, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// Environment variable naming the default output directory.
pub const OUT_DIR_VAR: &str = "CAUSALOT_OUT_DIR";

fn context(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Invalid(format!("{}: {e}", path.display()))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| context(path, e))?;
    serde_json::from_str(&text).map_err(|e| context(path, e))
}

pub fn read_tree(path: &Path) -> Result<ScenarioTree> {
    ScenarioTree::from_file(&read_json::<TreeFile>(path)?)
}

pub fn read_cost_matrix(path: &Path) -> Result<ExplicitMatrix> {
    ExplicitMatrix::from_csv(fs::File::open(path).map_err(|e| context(path, e))?)
}

/// `{"labels": [...]}` or `{"builtin": "sign_terminal" | "terminal_value" | "leaf"}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LabelsFile {
    Explicit { labels: Vec<u32> },
    Builtin { builtin: String },
}

impl LabelsFile {
    pub fn resolve(&self, tree: &ScenarioTree) -> Result<AtomLabeling> {
        match self {
            LabelsFile::Explicit { labels } => AtomLabeling::new(tree, labels),
            LabelsFile::Builtin { builtin } => match builtin.as_str() {
                "sign_terminal" => Ok(AtomLabeling::sign_terminal(tree)),
                "terminal_value" => AtomLabeling::terminal_value(tree),
                "leaf" => AtomLabeling::leaf_identity(tree),
                other => Err(Error::Invalid(format!("unknown builtin labeling '{other}'"))),
            },
        }
    }
}

/// Filtration file, tagged by `kind`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FiltrationFile {
    Natural,
    Initial {
        #[serde(flatten)]
        labels: LabelsFile,
    },
    /// Either explicit times `tau` or `{"builtin": "last_zero"}`.
    Progressive {
        #[serde(default)]
        tau: Option<Vec<usize>>,
        #[serde(default)]
        builtin: Option<String>,
    },
    /// One list of atoms (lists of leaves) per step.
    Explicit { partitions: Vec<Vec<Vec<usize>>> },
}

impl FiltrationFile {
    pub fn resolve(&self, tree: &ScenarioTree) -> Result<FiltrationSeq> {
        let f = natural_filtration(tree);
        match self {
            FiltrationFile::Natural => Ok(f),
            FiltrationFile::Initial { labels } => enlarge_initial(&f, &labels.resolve(tree)?),
            FiltrationFile::Progressive { tau: Some(tau), builtin: None } => enlarge_progressive(&f, tau),
            FiltrationFile::Progressive { tau: None, builtin: Some(b) } if b == "last_zero" => {
                enlarge_progressive(&f, &last_zero_time(tree))
            }
            FiltrationFile::Progressive { .. } => {
                Err(Error::Invalid("progressive filtration needs either `tau` or builtin \"last_zero\"".into()))
            }
            FiltrationFile::Explicit { partitions } => {
                let parts = partitions
                    .iter()
                    .map(|atoms| Partition::from_atoms(tree.n_leaves(), atoms))
                    .collect::<Result<Vec<_>>>()?;
                FiltrationSeq::new(tree, parts, FiltrationKind::Enlarged)
            }
        }
    }
}

pub fn read_filtration(path: Option<&Path>, tree: &ScenarioTree) -> Result<FiltrationSeq> {
    match path {
        Some(p) => read_json::<FiltrationFile>(p)?.resolve(tree),
        None => Ok(natural_filtration(tree)),
    }
}

/// `{"builtin": name, "K": k}` or `{"table": [{"k", "path", "value"}], "K": k}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PayoffFile {
    Builtin {
        builtin: String,
        #[serde(rename = "K", default)]
        lipschitz: Option<f64>,
    },
    Table {
        table: Vec<TableEntry>,
        #[serde(rename = "K")]
        lipschitz: f64,
    },
}

impl PayoffFile {
    pub fn resolve(&self) -> Result<PayoffSpec> {
        match self {
            PayoffFile::Builtin { builtin, lipschitz } => {
                let mut spec = PayoffSpec::builtin(builtin)?;
                if let Some(k) = lipschitz {
                    spec.lipschitz = *k;
                }
                Ok(spec)
            }
            PayoffFile::Table { table, lipschitz } => Ok(PayoffSpec::new(Payoff::Table(table.clone()), *lipschitz)),
        }
    }
}

pub fn read_market(path: &Path) -> Result<MarketSpec> {
    MarketSpec::from_config(&read_json::<MarketConfig>(path)?)
}

/// Resolves an output path: relative paths land in `$CAUSALOT_OUT_DIR`
/// when it is set; without `--out` the file is `<command>.json` there (or
/// in the working directory).
pub fn output_path(out: Option<&Path>, default_name: &str) -> PathBuf {
    let dir = std::env::var_os(OUT_DIR_VAR).map(PathBuf::from);
    match (out, dir) {
        (Some(p), Some(d)) if p.is_relative() => d.join(p),
        (Some(p), _) => p.to_path_buf(),
        (None, Some(d)) => d.join(default_name),
        (None, None) => PathBuf::from(default_name),
    }
}

/// Writes through a temporary sibling file and a rename, so readers never
/// see a partial file.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let name = path.file_name().ok_or_else(|| Error::Invalid(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.{}.tmp", name.to_string_lossy(), std::process::id()));
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}
