//! Artifact writing: `metrics.csv`, `summary.json`, `timings.csv` and
//! `fixtures/*.json`.

use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::experiments::{fmt_float, Report};

/// SHA-256 of the compact JSON text of a resolved document. Object keys are
/// sorted, so equal documents hash equally.
pub fn config_hash(resolved: &Value) -> String {
    let text = serde_json::to_string(resolved).expect("documents serialize");
    hex::encode(Sha256::digest(text.as_bytes()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config_hash: String,
    pub master_seed: u64,
    pub experiment: String,
    /// `ok` or `diverged`.
    pub status: String,
    /// Column order of the accompanying `metrics.csv`.
    pub columns: Vec<String>,
    pub results: Value,
    pub config: Value,
}

#[derive(Serialize)]
struct Fixture<'a> {
    config_hash: &'a str,
    master_seed: u64,
    kind: &'a str,
    data: &'a Value,
}

fn csv_error(e: csv::Error) -> io::Error {
    io::Error::other(e)
}

pub fn write_csv(path: &Path, columns: &[&str], rows: &[Vec<String>]) -> io::Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    w.write_record(columns).map_err(csv_error)?;
    for row in rows {
        w.write_record(row).map_err(csv_error)?;
    }
    w.flush()
}

/// Writes every artifact of `report` into `dir` and returns the summary.
pub fn write_artifacts(dir: &Path, resolved: &Value, master_seed: u64, experiment: &str, report: &Report) -> io::Result<Summary> {
    fs::create_dir_all(dir)?;
    let hash = config_hash(resolved);
    write_csv(&dir.join("metrics.csv"), &report.columns, &report.rows)?;

    let timing_rows: Vec<Vec<String>> = report
        .timings
        .iter()
        .map(|(label, ms)| vec![label.clone(), fmt_float(*ms)])
        .collect();
    write_csv(&dir.join("timings.csv"), &["label", "wall_ms"], &timing_rows)?;

    let summary = Summary {
        config_hash: hash.clone(),
        master_seed,
        experiment: experiment.to_string(),
        status: if report.diverged { "diverged" } else { "ok" }.to_string(),
        columns: report.columns.iter().map(|c| c.to_string()).collect(),
        results: report.results.clone(),
        config: resolved.clone(),
    };
    write_json(&dir.join("summary.json"), &summary)?;

    if !report.fixtures.is_empty() {
        let fixtures = dir.join("fixtures");
        fs::create_dir_all(&fixtures)?;
        for (name, data) in &report.fixtures {
            let kind = name.trim_end_matches(".json");
            let f = Fixture {
                config_hash: &hash,
                master_seed,
                kind,
                data,
            };
            write_json(&fixtures.join(name), &f)?;
        }
    }
    Ok(summary)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> io::Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(io::Error::other)?;
    text.push('\n');
    fs::write(path, text)
}

/// Reads a `metrics.csv` back as a header and string rows.
pub fn read_metrics(path: &Path) -> io::Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut r = csv::Reader::from_path(path).map_err(csv_error)?;
    let header = r.headers().map_err(csv_error)?.iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|rec| rec.iter().map(String::from).collect()))
        .collect::<Result<_, _>>()
        .map_err(csv_error)?;
    Ok((header, rows))
}
