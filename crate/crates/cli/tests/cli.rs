use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use fedlr_cli::output::read_metrics;
use fedlr_cli::{run_document, Overrides, Summary, EXIT_CONFIG, EXIT_DIVERGED};
use serde_json::{json, Value};

fn fedlr(dir: &Path, args: &[&str], threads: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_fedlr"));
    cmd.current_dir(dir).args(args);
    match threads {
        Some(t) => cmd.env("FEDLR_THREADS", t),
        None => cmd.env_remove("FEDLR_THREADS"),
    };
    cmd.output().expect("binary runs")
}

fn write_doc(dir: &Path, name: &str, doc: &Value) {
    fs::write(dir.join(name), serde_json::to_string_pretty(doc).unwrap()).unwrap();
}

fn summary(dir: &Path) -> Summary {
    serde_json::from_str(&fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap()
}

fn small_federation(sync: &str, optimizer: &str) -> Value {
    json!({
        "experiment": "federated",
        "master_seed": 4,
        "config": {
            "fed": {
                "num_clients": 6, "participants": 3, "rounds": 4, "local_steps": 3,
                "rank": 2, "optimizer": optimizer, "sync_mode": sync
            },
            "task": { "rows": 6, "cols": 5, "noise_std": 0.1 }
        }
    })
}

#[test]
fn validate_reports_config_errors_with_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    write_doc(dir.path(), "ok.json", &small_federation("ajive", "galore_adamw"));
    let out = fedlr(dir.path(), &["validate", "--config", "ok.json"], None);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let bad = json!({ "experiment": "federated", "config": { "fed": { "num_clients": 2, "participants": 5 } } });
    write_doc(dir.path(), "bad.json", &bad);
    let out = fedlr(dir.path(), &["validate", "--config", "bad.json"], None);
    assert_eq!(out.status.code(), Some(EXIT_CONFIG as i32));
    assert!(String::from_utf8_lossy(&out.stderr).contains("participants exceed clients"));

    fs::write(dir.path().join("broken.json"), "{ not json").unwrap();
    let out = fedlr(dir.path(), &["run", "--config", "broken.json"], None);
    assert_eq!(out.status.code(), Some(EXIT_CONFIG as i32));
    assert!(!dir.path().join("out").exists());

    let out = fedlr(dir.path(), &["run", "--config", "missing.json"], None);
    assert_eq!(out.status.code(), Some(EXIT_CONFIG as i32));
}

#[test]
fn unknown_keys_are_listed() {
    let dir = tempfile::tempdir().unwrap();
    let doc = json!({ "experiment": "landscape", "config": { "trails": 3, "trial": { "stpes": 4 } } });
    write_doc(dir.path(), "typo.json", &doc);
    let out = fedlr(dir.path(), &["run", "--config", "typo.json"], None);
    assert_eq!(out.status.code(), Some(EXIT_CONFIG as i32));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("config.trails") && err.contains("config.trial.stpes"), "{err}");
}

#[test]
fn diverged_run_exits_3_and_still_writes_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let doc = json!({
        "experiment": "federated",
        "config": {
            "fed": {
                "num_clients": 2, "participants": 2, "rounds": 2, "local_steps": 50,
                "optimizer": "sgd", "sync_mode": "none", "lr": 1e6
            },
            "init_std": 1.0
        }
    });
    write_doc(dir.path(), "boom.json", &doc);
    let out = fedlr(dir.path(), &["run", "--config", "boom.json", "--out", "o"], None);
    assert_eq!(out.status.code(), Some(EXIT_DIVERGED as i32));
    let s = summary(&dir.path().join("o"));
    assert_eq!(s.status, "diverged");
    let (_, rows) = read_metrics(&dir.path().join("o/metrics.csv")).unwrap();
    assert!(rows.iter().all(|r| r[9] == "true"));
}

#[test]
fn single_client_summary_loss_is_the_local_terminal_loss() {
    let dir = tempfile::tempdir().unwrap();
    let doc = json!({
        "experiment": "federated",
        "config": {
            "fed": { "num_clients": 1, "participants": 1, "rounds": 1, "optimizer": "sgd", "sync_mode": "none" },
            "task": { "noise_std": 0.2 }
        }
    });
    let out = run_document(&doc, &Overrides { out: Some(dir.path().to_path_buf()), ..Overrides::default() }).unwrap();
    let r = &out.summary.results;
    assert_eq!(r["global_loss"], r["mean_client_loss"]);
    assert!(r["global_loss"].as_f64().unwrap() < r["initial_global_loss"].as_f64().unwrap());
}

#[test]
fn thread_count_does_not_change_metrics() {
    let dir = tempfile::tempdir().unwrap();
    write_doc(dir.path(), "fed.json", &small_federation("ajive", "galore_adamw"));
    let a = fedlr(dir.path(), &["run", "--config", "fed.json", "--out", "t1"], Some("1"));
    let b = fedlr(dir.path(), &["run", "--config", "fed.json", "--out", "t3"], Some("3"));
    assert!(a.status.success() && b.status.success());
    let read = |d: &str| fs::read(dir.path().join(d).join("metrics.csv")).unwrap();
    assert_eq!(read("t1"), read("t3"));

    let out = fedlr(dir.path(), &["run", "--config", "fed.json"], Some("0"));
    assert_eq!(out.status.code(), Some(EXIT_CONFIG as i32));
}

#[test]
fn seed_and_trials_flags_reach_the_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let doc = json!({ "experiment": "partition_stats", "master_seed": 1, "write_fixtures": true });
    write_doc(dir.path(), "p.json", &doc);
    let out = fedlr(dir.path(), &["run", "--config", "p.json", "--seed", "11", "--trials", "3", "--out", "p"], None);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let p = dir.path().join("p");
    let s = summary(&p);
    assert_eq!(s.master_seed, 11);
    assert_eq!(s.config["master_seed"], 11);
    assert_eq!(s.config["config"]["seeds"], 3);
    let (header, rows) = read_metrics(&p.join("metrics.csv")).unwrap();
    assert_eq!(header, s.columns);
    assert_eq!(rows.len(), 3);

    let fixture: Value = serde_json::from_str(&fs::read_to_string(p.join("fixtures/partition.json")).unwrap()).unwrap();
    assert_eq!(fixture["config_hash"], s.config_hash);
    assert_eq!(fixture["master_seed"], 11);
    let text = fs::read_to_string(p.join("fixtures/partition.json")).unwrap();
    assert!(text.trim_start().starts_with("{\n  \"config_hash\""));
    assert!(p.join("timings.csv").exists());
}

#[test]
fn large_alpha_partitions_are_near_uniform() {
    let dir = tempfile::tempdir().unwrap();
    let doc = json!({
        "experiment": "partition_stats",
        "config": { "dirichlet": { "alpha": 1e6, "clients": 10, "classes": 10 }, "seeds": 3 }
    });
    let out = run_document(&doc, &Overrides { out: Some(dir.path().to_path_buf()), ..Overrides::default() }).unwrap();
    assert!(out.summary.results["mean_max_uniform_gap"].as_f64().unwrap() < 0.05);
    let skewed = json!({ "experiment": "partition_stats" });
    let out = run_document(&skewed, &Overrides { out: Some(dir.path().join("s")), ..Overrides::default() }).unwrap();
    assert!(out.summary.results["mean_active_classes"].as_f64().unwrap() < 9.0);
}

#[test]
fn every_numeric_cell_parses_back() {
    let dir = tempfile::tempdir().unwrap();
    let doc = small_federation("server_only", "adamw");
    run_document(&doc, &Overrides { out: Some(dir.path().to_path_buf()), ..Overrides::default() }).unwrap();
    let (header, rows) = read_metrics(&dir.path().join("metrics.csv")).unwrap();
    assert_eq!(rows.len(), 4);
    for row in &rows {
        for (col, cell) in header.iter().zip(row) {
            if !["failed", "sync_mode"].contains(&col.as_str()) {
                let x: f64 = cell.parse().unwrap_or_else(|_| panic!("{col}={cell}"));
                assert_eq!(fedlr_cli::experiments::fmt_float(x).parse::<f64>().unwrap(), x);
            }
        }
        assert_eq!(row[11], "server_only");
    }
}
