//! Consolidation of a results directory into one CSV and gnuplot data files.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use causalot::{Error, Result};
use serde_json::{Map, Value};

use crate::files::write_atomic;

const COLUMNS: [&str; 6] = ["name", "N", "value", "bound", "gap", "pass"];

fn cell(v: Option<&Value>) -> String {
    match v {
        Some(Value::Number(n)) => n.to_string(),
        Some(Value::Bool(b)) => b.to_string(),
        Some(Value::String(s)) => s.clone(),
        _ => String::new(),
    }
}

fn csv_row(name: &str, fields: &Map<String, Value>) -> Vec<String> {
    let mut row = vec![name.to_string()];
    row.extend(COLUMNS[1..].iter().map(|c| cell(fields.get(*c))));
    row
}

/// Whitespace-separated columns, `N` first, then every numeric field of
/// the rows in name order; booleans become 0/1 and missing values NaN.
fn dat_table(name: &str, rows: &[Map<String, Value>]) -> String {
    let keys: BTreeSet<&str> = rows
        .iter()
        .flat_map(|r| r.iter().filter(|(k, v)| *k != "N" && (v.is_number() || v.is_boolean())).map(|(k, _)| k.as_str()))
        .collect();
    let mut out = format!("# {name}\n# N");
    for k in &keys {
        out.push(' ');
        out.push_str(k);
    }
    out.push('\n');
    for r in rows {
        out.push_str(&cell(r.get("N")));
        for k in &keys {
            out.push(' ');
            out.push_str(&match r.get(*k) {
                Some(Value::Bool(b)) => u8::from(*b).to_string(),
                Some(v @ Value::Number(_)) => cell(Some(v)),
                _ => "NaN".into(),
            });
        }
        out.push('\n');
    }
    out
}

/// Reads every `*.json` in `dir` in file-name order and writes one CSV row
/// per experiment (one per entry of `rows` for studies). Studies also get a
/// `<stem>.dat` file next to the CSV. Unreadable or unrecognised files are
/// skipped with a warning.
pub fn write_report(dir: &Path, out: &Path) -> Result<String> {
    if !dir.is_dir() {
        return Err(Error::Invalid(format!("{} is not a directory", dir.display())));
    }
    let mut paths: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json") && p.is_file())
        .collect();
    paths.sort();

    let mut writer = csv::Writer::from_writer(Vec::new());
    let write_err = |e: csv::Error| Error::Invalid(format!("csv: {e}"));
    writer.write_record(COLUMNS).map_err(write_err)?;
    let out_dir = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let (mut n_rows, mut skipped) = (0, 0);
    for path in &paths {
        let parsed = fs::read_to_string(path).map_err(Error::from).and_then(|t| Ok(serde_json::from_str::<Value>(&t)?));
        let obj = match parsed {
            Ok(Value::Object(obj)) if obj.get("name").is_some_and(Value::is_string) => obj,
            Ok(_) => {
                eprintln!("warning: {}: not a result file (no \"name\"), skipped", path.display());
                skipped += 1;
                continue;
            }
            Err(e) => {
                eprintln!("warning: {}: {e}, skipped", path.display());
                skipped += 1;
                continue;
            }
        };
        let name = obj["name"].as_str().unwrap_or_default();
        match obj.get("rows").and_then(Value::as_array) {
            Some(rows) => {
                let rows: Vec<Map<String, Value>> = rows.iter().filter_map(|r| r.as_object().cloned()).collect();
                for r in &rows {
                    writer.write_record(csv_row(name, r)).map_err(write_err)?;
                    n_rows += 1;
                }
                let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                write_atomic(&out_dir.join(format!("{stem}.dat")), dat_table(name, &rows).as_bytes())?;
            }
            None => {
                writer.write_record(csv_row(name, &obj)).map_err(write_err)?;
                n_rows += 1;
            }
        }
    }
    let bytes = writer.into_inner().map_err(|e| Error::Invalid(format!("csv: {e}")))?;
    write_atomic(out, &bytes)?;
    Ok(format!("report: {n_rows} rows from {} files ({skipped} skipped)", paths.len() - skipped))
}
