//! Experiment runners. Each returns the rows of `metrics.csv`, a results
//! object for `summary.json`, wall-clock timings and optional fixtures.

use std::time::Instant;

use serde::Serialize;
use serde_json::{json, Map, Value};

use fedlr_core::ajive::sync_second_moments;
use fedlr_core::fedsim::{run_federation_with, RoundMetrics};
use fedlr_core::linalg::{derive_seed, rank_r_truncate, SeededRng};
use fedlr_core::stats::mean;
use fedlr_core::tasks::{
    dirichlet_partition, gen_ajive_validation, run_landscape_trials, AjiveValidationConfig,
    QuadEnsemble, SoftminLandscape,
};
use fedlr_core::theory::{check_containment, check_rms_corollary, envelope_exceedance};
use fedlr_core::{Matrix, Result};

use crate::config::{
    AjiveValidateConfig, ExperimentConfig, FederatedConfig, LandscapeExperimentConfig,
    PartitionStatsConfig, RunSpec, TheoryCheck, TheoryCheckConfig, TAG_ENSEMBLE, TAG_ENVELOPE,
    TAG_INIT, TAG_PARTITION, TAG_RUNS, TAG_TASK, TAG_TRIALS, TAG_VIEWS,
};

/// Everything an experiment produces before it is written out.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    pub columns: Vec<&'static str>,
    pub rows: Vec<Vec<String>>,
    pub results: Value,
    /// `(label, milliseconds)`; kept apart from the metrics so those stay
    /// byte-stable across reruns.
    pub timings: Vec<(String, f64)>,
    /// `(file name, payload)` pairs written under `fixtures/`.
    pub fixtures: Vec<(String, Value)>,
    /// A round failed or the final loss is not finite.
    pub diverged: bool,
}

/// Shortest decimal that parses back to the same `f64`.
pub fn fmt_float(x: f64) -> String {
    format!("{x:?}")
}

fn tag<T: Serialize>(value: &T) -> String {
    match serde_json::to_value(value) {
        Ok(Value::String(s)) => s,
        _ => String::new(),
    }
}

fn to_json<T: Serialize>(value: &T) -> Value {
    serde_json::to_value(value).expect("results serialize to JSON")
}

fn elapsed_ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

pub fn execute(spec: &RunSpec) -> Result<Report> {
    let seed = spec.master_seed;
    let mut report = match &spec.config {
        ExperimentConfig::Federated(c) => federated(c, seed)?,
        ExperimentConfig::Landscape(c) => landscape(c, seed)?,
        ExperimentConfig::AjiveValidate(c) => ajive_validate(c, seed)?,
        ExperimentConfig::TheoryCheck(c) => theory_check(c, seed)?,
        ExperimentConfig::PartitionStats(c) => partition_stats(c, seed)?,
    };
    if !spec.write_fixtures {
        report.fixtures.clear();
    }
    Ok(report)
}

pub const FEDERATED_COLUMNS: [&str; 12] = [
    "round",
    "global_loss",
    "excess_loss",
    "mean_client_loss",
    "aggregate_tail",
    "aggregate_rank",
    "max_local_deviation",
    "participants",
    "dropped",
    "failed",
    "uplink_floats",
    "sync_mode",
];

fn federated_row(m: &RoundMetrics, optimum_loss: f64) -> Vec<String> {
    vec![
        m.round.to_string(),
        fmt_float(m.global_loss),
        fmt_float(m.global_loss - optimum_loss),
        fmt_float(m.mean_client_loss),
        fmt_float(m.aggregate_tail),
        m.aggregate_rank.to_string(),
        fmt_float(m.max_local_deviation),
        m.participants.to_string(),
        m.dropped.to_string(),
        m.failed.to_string(),
        m.uplink_floats.to_string(),
        m.sync_mode.clone(),
    ]
}

fn federated(c: &FederatedConfig, master_seed: u64) -> Result<Report> {
    let task_seed = c.task_seed.unwrap_or_else(|| derive_seed(master_seed, TAG_TASK));
    let ens = QuadEnsemble::generate(&c.task, task_seed)?;
    let (rows, cols) = ens.shape();
    let theta0 = if c.init_std > 0.0 {
        SeededRng::new(derive_seed(master_seed, TAG_INIT)).gaussian_matrix(rows, cols, c.init_std)
    } else {
        Matrix::zeros(rows, cols)
    };
    let initial_loss = ens.global_loss(&theta0);

    let mut timings = Vec::new();
    let mut last = Instant::now();
    let run = run_federation_with(&ens, &c.fed, theta0, &mut |m| {
        timings.push((format!("round_{}", m.round), elapsed_ms(last)));
        last = Instant::now();
    })?;

    let failed_rounds = run.metrics.iter().filter(|m| m.failed).count();
    let last = run.metrics.last();
    let global_loss = last.map_or(initial_loss, |m| m.global_loss);
    let results = json!({
        "rounds": run.metrics.len(),
        "initial_global_loss": initial_loss,
        "global_loss": global_loss,
        "mean_client_loss": last.map(|m| m.mean_client_loss),
        "optimum_loss": ens.optimum_loss,
        "excess_loss": global_loss - ens.optimum_loss,
        "failed_rounds": failed_rounds,
        "total_uplink_floats": run.metrics.iter().map(|m| m.uplink_floats).sum::<usize>(),
        "task_seed": task_seed,
    });
    Ok(Report {
        columns: FEDERATED_COLUMNS.to_vec(),
        rows: run.metrics.iter().map(|m| federated_row(m, ens.optimum_loss)).collect(),
        results,
        timings,
        fixtures: vec![
            ("task.json".into(), to_json(&ens)),
            ("final_state.json".into(), to_json(&run.state)),
        ],
        diverged: failed_rounds > 0 || !global_loss.is_finite(),
    })
}

pub const LANDSCAPE_COLUMNS: [&str; 5] = ["method", "trials", "flat_rate", "sharp_rate", "unconverged_rate"];

fn landscape(c: &LandscapeExperimentConfig, master_seed: u64) -> Result<Report> {
    let land = SoftminLandscape::new(&c.landscape)?;
    // Every method starts from the same perturbed points.
    let seed = derive_seed(master_seed, TAG_TRIALS);
    let mut report = Report {
        columns: LANDSCAPE_COLUMNS.to_vec(),
        fixtures: vec![("landscape.json".into(), to_json(&land))],
        ..Report::default()
    };
    let mut results = Map::new();
    for &method in &c.methods {
        let start = Instant::now();
        let rates = run_landscape_trials(c.trials, method, &land, &c.trial, seed)?;
        report.timings.push((tag(&method), elapsed_ms(start)));
        report.rows.push(vec![
            tag(&method),
            c.trials.to_string(),
            fmt_float(rates.flat_rate),
            fmt_float(rates.sharp_rate),
            fmt_float(rates.unconverged_rate),
        ]);
        results.insert(tag(&method), to_json(&rates));
    }
    report.results = Value::Object(results);
    Ok(report)
}

pub const AJIVE_COLUMNS: [&str; 6] = [
    "clients",
    "seeds",
    "ajive_error",
    "naive_error",
    "truncated_error",
    "v_star_norm",
];

/// Frobenius errors against the ground truth, averaged over seeds.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AjiveErrors {
    pub clients: usize,
    pub ajive_error: f64,
    pub naive_error: f64,
    pub truncated_error: f64,
    pub v_star_norm: f64,
}

fn ajive_validate(c: &AjiveValidateConfig, master_seed: u64) -> Result<Report> {
    let mut report = Report {
        columns: AJIVE_COLUMNS.to_vec(),
        ..Report::default()
    };
    let mut sweep = Vec::new();
    for &k in &c.client_counts {
        let start = Instant::now();
        let data_cfg = AjiveValidationConfig {
            clients: k,
            ..c.data.clone()
        };
        let weights = vec![1.0 / k as f64; k];
        let mut errors = [Vec::new(), Vec::new(), Vec::new(), Vec::new()];
        for s in 0..c.seeds {
            let data = gen_ajive_validation(&data_cfg, derive_seed(derive_seed(master_seed, TAG_VIEWS), s as u64))?;
            if s == 0 && report.fixtures.is_empty() {
                report.fixtures.push(("ajive_views.json".into(), to_json(&data)));
            }
            let mut naive = Matrix::zeros(data.v_star.rows(), data.v_star.cols());
            for (v, &w) in data.views.iter().zip(&weights) {
                naive.axpy(w, v);
            }
            let synced = sync_second_moments(&data.views, c.joint_rank, &weights)?;
            let truncated = rank_r_truncate(&naive, c.joint_rank)?;
            errors[0].push((&synced - &data.v_star).frobenius_norm());
            errors[1].push((&naive - &data.v_star).frobenius_norm());
            errors[2].push((&truncated - &data.v_star).frobenius_norm());
            errors[3].push(data.v_star.frobenius_norm());
        }
        let e = AjiveErrors {
            clients: k,
            ajive_error: mean(&errors[0]),
            naive_error: mean(&errors[1]),
            truncated_error: mean(&errors[2]),
            v_star_norm: mean(&errors[3]),
        };
        report.timings.push((format!("clients_{k}"), elapsed_ms(start)));
        report.rows.push(vec![
            k.to_string(),
            c.seeds.to_string(),
            fmt_float(e.ajive_error),
            fmt_float(e.naive_error),
            fmt_float(e.truncated_error),
            fmt_float(e.v_star_norm),
        ]);
        sweep.push(e);
    }
    report.results = json!({ "joint_rank": c.joint_rank, "sweep": sweep });
    Ok(report)
}

pub const THEORY_COLUMNS: [&str; 11] = [
    "check",
    "optimizer",
    "bias_v",
    "runs",
    "exceedances",
    "fraction",
    "statistic",
    "mean_statistic",
    "bound",
    "p_value",
    "holds",
];

fn theory_check(c: &TheoryCheckConfig, master_seed: u64) -> Result<Report> {
    let mut report = Report {
        columns: THEORY_COLUMNS.to_vec(),
        ..Report::default()
    };
    let mut results = Map::new();
    let empty = String::new;

    if c.checks.contains(&TheoryCheck::Envelope) {
        let start = Instant::now();
        let r = envelope_exceedance(&c.envelope.params, c.envelope.trials, derive_seed(master_seed, TAG_ENVELOPE))?;
        let holds = r.p_value >= 1.0 - c.envelope.confidence;
        report.timings.push(("envelope".into(), elapsed_ms(start)));
        report.rows.push(vec![
            "envelope".into(),
            empty(),
            empty(),
            r.trials.to_string(),
            r.exceedances.to_string(),
            fmt_float(r.fraction),
            empty(),
            empty(),
            fmt_float(r.envelope),
            fmt_float(r.p_value),
            holds.to_string(),
        ]);
        let mut v = to_json(&r);
        v["holds"] = Value::from(holds);
        results.insert("envelope".into(), v);
    }

    if c.checks.contains(&TheoryCheck::Containment) {
        let k = &c.containment;
        let ens = QuadEnsemble::generate(&k.ensemble, derive_seed(master_seed, TAG_ENSEMBLE))?;
        // One run seed for every level so bias sweeps share their noise.
        let run_seed = derive_seed(master_seed, TAG_RUNS);
        let mut per_optimizer = Map::new();
        for &opt in &k.optimizers {
            let mut levels = Vec::new();
            for &bias_v in &k.bias_v {
                let start = Instant::now();
                let p = k.params(&ens, bias_v)?;
                let r = check_containment(&ens, &p, opt, k.runs, run_seed)?;
                let holds = r.violation_fraction <= p.delta;
                report.timings.push((format!("containment_{}_{}", tag(&opt), fmt_float(bias_v)), elapsed_ms(start)));
                report.rows.push(vec![
                    "containment".into(),
                    tag(&opt),
                    fmt_float(bias_v),
                    r.runs.to_string(),
                    r.violations.to_string(),
                    fmt_float(r.violation_fraction),
                    fmt_float(r.max_deviation),
                    fmt_float(r.mean_max_deviation),
                    fmt_float(r.bound),
                    empty(),
                    holds.to_string(),
                ]);
                let mut v = to_json(&r);
                v["bias_v"] = Value::from(bias_v);
                v["holds"] = Value::from(holds);
                levels.push(v);
            }
            let means: Vec<f64> = levels.iter().filter_map(|v| v["mean_max_deviation"].as_f64()).collect();
            per_optimizer.insert(
                tag(&opt),
                json!({
                    "levels": levels,
                    "mean_deviation_increasing_in_bias_v": means.windows(2).all(|w| w[1] > w[0]),
                }),
            );
        }
        results.insert("containment".into(), Value::Object(per_optimizer));
    }

    if c.checks.contains(&TheoryCheck::Rms) {
        let start = Instant::now();
        let ens = QuadEnsemble::generate(&c.rms.ensemble, derive_seed(master_seed, TAG_ENSEMBLE))?;
        let p = c.rms.params(&ens);
        let r = check_rms_corollary(&ens, &p, c.rms.runs, derive_seed(master_seed, TAG_RUNS))?;
        report.timings.push(("rms".into(), elapsed_ms(start)));
        report.rows.push(vec![
            "rms".into(),
            "sgd".into(),
            empty(),
            r.runs.to_string(),
            empty(),
            empty(),
            fmt_float(r.lhs),
            empty(),
            fmt_float(r.rhs),
            empty(),
            r.holds.to_string(),
        ]);
        let mut v = to_json(&r);
        v["dissimilarity_floor"] = Value::from(ens.dissimilarity_floor);
        v["dissimilarity_growth"] = Value::from(ens.dissimilarity_growth);
        v["step_size_product"] = Value::from(p.step_size_product());
        results.insert("rms".into(), v);
    }
    report.results = Value::Object(results);
    Ok(report)
}

pub const PARTITION_COLUMNS: [&str; 7] = [
    "seed_index",
    "alpha",
    "clients",
    "mean_active_classes",
    "min_client_samples",
    "max_client_samples",
    "max_uniform_gap",
];

fn partition_stats(c: &PartitionStatsConfig, master_seed: u64) -> Result<Report> {
    let d = &c.dirichlet;
    let labels: Vec<usize> = (0..d.classes)
        .flat_map(|k| std::iter::repeat(k).take(d.samples_per_class))
        .collect();
    let mut report = Report {
        columns: PARTITION_COLUMNS.to_vec(),
        ..Report::default()
    };
    let start = Instant::now();
    let mut active = Vec::new();
    let mut gaps = Vec::new();
    for s in 0..c.seeds {
        let part = dirichlet_partition(
            &labels,
            d.clients,
            d.alpha,
            derive_seed(derive_seed(master_seed, TAG_PARTITION), s as u64),
        )?;
        let sizes: Vec<usize> = part.assignments.iter().map(Vec::len).collect();
        let uniform = 1.0 / d.classes as f64;
        let gap = part
            .proportions
            .iter()
            .flatten()
            .map(|p| (p - uniform).abs())
            .fold(0.0, f64::max);
        let a = part.mean_active_classes(c.active_threshold);
        report.rows.push(vec![
            s.to_string(),
            fmt_float(d.alpha),
            d.clients.to_string(),
            fmt_float(a),
            sizes.iter().min().copied().unwrap_or(0).to_string(),
            sizes.iter().max().copied().unwrap_or(0).to_string(),
            fmt_float(gap),
        ]);
        active.push(a);
        gaps.push(gap);
        if s == 0 {
            report.fixtures.push(("partition.json".into(), to_json(&part)));
        }
    }
    report.timings.push(("partitions".into(), elapsed_ms(start)));
    report.results = json!({
        "alpha": d.alpha,
        "mean_active_classes": mean(&active),
        "mean_max_uniform_gap": mean(&gaps),
    });
    Ok(report)
}
