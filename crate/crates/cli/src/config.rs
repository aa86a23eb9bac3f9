//! Run documents: schema, defaults, command-line overrides and diagnostics.
//!
//! A document is a JSON object
//!
//! ```json
//! { "experiment": "federated", "master_seed": 7, "write_fixtures": false,
//!   "output_dir": "out", "config": { ... } }
//! ```
//!
//! Only `experiment` is required. Missing `config` keys take the defaults of
//! the experiment's config type; unknown keys are errors.

use std::fmt;
use std::path::PathBuf;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use fedlr_core::fedsim::FedConfig;
use fedlr_core::linalg::derive_seed;
use fedlr_core::tasks::{
    AjiveValidationConfig, LandscapeConfig, QuadEnsemble, QuadEnsembleConfig, SoftminLandscape,
    TrapMethod, TrialConfig,
};
use fedlr_core::theory::{TheoryOptimizer, WhpParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Federated,
    Landscape,
    AjiveValidate,
    TheoryCheck,
    PartitionStats,
}

impl Experiment {
    pub const ALL: [Experiment; 5] = [
        Experiment::Federated,
        Experiment::Landscape,
        Experiment::AjiveValidate,
        Experiment::TheoryCheck,
        Experiment::PartitionStats,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Experiment::Federated => "federated",
            Experiment::Landscape => "landscape",
            Experiment::AjiveValidate => "ajive_validate",
            Experiment::TheoryCheck => "theory_check",
            Experiment::PartitionStats => "partition_stats",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|e| e.tag() == tag)
    }
}

/// A federated run on a heterogeneous quadratic task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FederatedConfig {
    /// `fed.master_seed` is overwritten by the document's `master_seed`.
    pub fed: FedConfig,
    /// `task.clients` and `task.weights` default to the `fed` values.
    pub task: QuadEnsembleConfig,
    /// Seed of the task generator; derived from the master seed when absent.
    pub task_seed: Option<u64>,
    /// Entry standard deviation of the random initial parameters; 0 starts at zero.
    pub init_std: f64,
}

impl Default for FederatedConfig {
    fn default() -> Self {
        let fed = FedConfig::default();
        FederatedConfig {
            task: QuadEnsembleConfig {
                clients: fed.num_clients,
                ..QuadEnsembleConfig::default()
            },
            fed,
            task_seed: None,
            init_std: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LandscapeExperimentConfig {
    pub landscape: LandscapeConfig,
    pub trial: TrialConfig,
    pub methods: Vec<TrapMethod>,
    pub trials: usize,
}

impl Default for LandscapeExperimentConfig {
    fn default() -> Self {
        LandscapeExperimentConfig {
            landscape: LandscapeConfig::default(),
            trial: TrialConfig::default(),
            methods: vec![TrapMethod::FullSgd, TrapMethod::Lora, TrapMethod::Galore],
            trials: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AjiveValidateConfig {
    /// Generator settings; `data.clients` is replaced by each sweep value.
    pub data: AjiveValidationConfig,
    pub client_counts: Vec<usize>,
    pub seeds: usize,
    pub joint_rank: usize,
}

impl Default for AjiveValidateConfig {
    fn default() -> Self {
        AjiveValidateConfig {
            data: AjiveValidationConfig::default(),
            client_counts: vec![5, 10, 20, 30],
            seeds: 10,
            joint_rank: 15,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TheoryCheck {
    Envelope,
    Containment,
    Rms,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvelopeCheckConfig {
    pub params: WhpParams,
    pub trials: usize,
    /// Confidence of the one-sided binomial test on the exceedance count.
    pub confidence: f64,
}

impl Default for EnvelopeCheckConfig {
    fn default() -> Self {
        EnvelopeCheckConfig {
            params: WhpParams {
                sigma: 1.0,
                dim: 8,
                clients: 4,
                rounds: 5,
                steps: 5,
                delta: 0.1,
                ..WhpParams::default()
            },
            trials: 2000,
            confidence: 0.99,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContainmentCheckConfig {
    /// Must clip; the clip threshold is the gradient bound.
    pub ensemble: QuadEnsembleConfig,
    pub rounds: usize,
    pub steps: usize,
    pub delta: f64,
    pub lr: f64,
    pub bias_m: f64,
    /// Second-moment bias levels; each optimizer runs once per level.
    pub bias_v: Vec<f64>,
    pub reference_v0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub optimizers: Vec<TheoryOptimizer>,
    pub runs: usize,
}

impl Default for ContainmentCheckConfig {
    fn default() -> Self {
        let base = WhpParams::default();
        ContainmentCheckConfig {
            ensemble: QuadEnsembleConfig {
                rows: 4,
                cols: 4,
                clients: 4,
                noise_std: 0.1,
                clip: Some(2.0),
                ..QuadEnsembleConfig::default()
            },
            rounds: 3,
            steps: 5,
            delta: 0.05,
            lr: 0.04,
            bias_m: 0.5,
            bias_v: vec![0.0, 0.5, 1.0],
            reference_v0: 0.2,
            beta1: base.beta1,
            beta2: base.beta2,
            eps: base.eps,
            optimizers: vec![TheoryOptimizer::Sgd, TheoryOptimizer::Momentum, TheoryOptimizer::Adamw],
            runs: 1000,
        }
    }
}

impl ContainmentCheckConfig {
    /// Parameters for one bias level on a generated ensemble.
    pub fn params(&self, ens: &QuadEnsemble, bias_v: f64) -> fedlr_core::Result<WhpParams> {
        let base = WhpParams::for_ensemble(ens, self.rounds, self.steps, self.delta, self.lr)?;
        Ok(WhpParams {
            bias_m: self.bias_m,
            bias_v,
            reference_v0: self.reference_v0,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            ..base
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RmsCheckConfig {
    /// Must not clip and must use uniform weights.
    pub ensemble: QuadEnsembleConfig,
    pub steps: usize,
    pub lr: f64,
    pub grad_bound: f64,
    pub runs: usize,
}

impl Default for RmsCheckConfig {
    fn default() -> Self {
        RmsCheckConfig {
            ensemble: QuadEnsembleConfig {
                rows: 8,
                cols: 8,
                clients: 4,
                noise_std: 0.1,
                ..QuadEnsembleConfig::default()
            },
            steps: 5,
            lr: 0.015,
            grad_bound: 50.0,
            runs: 500,
        }
    }
}

impl RmsCheckConfig {
    pub fn params(&self, ens: &QuadEnsemble) -> WhpParams {
        WhpParams {
            sigma: ens.noise_std,
            dim: ens.dim(),
            clients: ens.centers.len(),
            rounds: 1,
            steps: self.steps,
            grad_bound: self.grad_bound,
            smoothness: ens.smoothness,
            lr: self.lr,
            ..WhpParams::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TheoryCheckConfig {
    pub checks: Vec<TheoryCheck>,
    pub envelope: EnvelopeCheckConfig,
    pub containment: ContainmentCheckConfig,
    pub rms: RmsCheckConfig,
}

impl Default for TheoryCheckConfig {
    fn default() -> Self {
        TheoryCheckConfig {
            checks: vec![TheoryCheck::Envelope, TheoryCheck::Containment, TheoryCheck::Rms],
            envelope: EnvelopeCheckConfig::default(),
            containment: ContainmentCheckConfig::default(),
            rms: RmsCheckConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DirichletSettings {
    pub alpha: f64,
    pub clients: usize,
    pub classes: usize,
    pub samples_per_class: usize,
}

impl Default for DirichletSettings {
    fn default() -> Self {
        DirichletSettings {
            alpha: 0.5,
            clients: 50,
            classes: 10,
            samples_per_class: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PartitionStatsConfig {
    pub dirichlet: DirichletSettings,
    pub seeds: usize,
    /// Share of a client's mass above which a class counts as held.
    pub active_threshold: f64,
}

impl Default for PartitionStatsConfig {
    fn default() -> Self {
        PartitionStatsConfig {
            dirichlet: DirichletSettings::default(),
            seeds: 10,
            active_threshold: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ExperimentConfig {
    Federated(FederatedConfig),
    Landscape(LandscapeExperimentConfig),
    AjiveValidate(AjiveValidateConfig),
    TheoryCheck(TheoryCheckConfig),
    PartitionStats(PartitionStatsConfig),
}

impl ExperimentConfig {
    pub fn default_for(experiment: Experiment) -> Self {
        match experiment {
            Experiment::Federated => ExperimentConfig::Federated(FederatedConfig::default()),
            Experiment::Landscape => ExperimentConfig::Landscape(LandscapeExperimentConfig::default()),
            Experiment::AjiveValidate => ExperimentConfig::AjiveValidate(AjiveValidateConfig::default()),
            Experiment::TheoryCheck => ExperimentConfig::TheoryCheck(TheoryCheckConfig::default()),
            Experiment::PartitionStats => ExperimentConfig::PartitionStats(PartitionStatsConfig::default()),
        }
    }

    pub fn experiment(&self) -> Experiment {
        match self {
            ExperimentConfig::Federated(_) => Experiment::Federated,
            ExperimentConfig::Landscape(_) => Experiment::Landscape,
            ExperimentConfig::AjiveValidate(_) => Experiment::AjiveValidate,
            ExperimentConfig::TheoryCheck(_) => Experiment::TheoryCheck,
            ExperimentConfig::PartitionStats(_) => Experiment::PartitionStats,
        }
    }

    pub fn to_value(&self) -> Value {
        let v = match self {
            ExperimentConfig::Federated(c) => serde_json::to_value(c),
            ExperimentConfig::Landscape(c) => serde_json::to_value(c),
            ExperimentConfig::AjiveValidate(c) => serde_json::to_value(c),
            ExperimentConfig::TheoryCheck(c) => serde_json::to_value(c),
            ExperimentConfig::PartitionStats(c) => serde_json::to_value(c),
        };
        v.expect("config types serialize to JSON")
    }

    fn from_value(experiment: Experiment, value: Value) -> Result<Self, Diagnostic> {
        Ok(match experiment {
            Experiment::Federated => ExperimentConfig::Federated(parse(value)?),
            Experiment::Landscape => ExperimentConfig::Landscape(parse(value)?),
            Experiment::AjiveValidate => ExperimentConfig::AjiveValidate(parse(value)?),
            Experiment::TheoryCheck => ExperimentConfig::TheoryCheck(parse(value)?),
            Experiment::PartitionStats => ExperimentConfig::PartitionStats(parse(value)?),
        })
    }

    /// Applies `--trials`: the Monte Carlo or seed count of the experiment.
    fn set_trials(&mut self, n: usize) -> Result<(), Diagnostic> {
        match self {
            ExperimentConfig::Federated(_) => {
                return Err(Diagnostic::new("--trials", "federated runs have no trial count"))
            }
            ExperimentConfig::Landscape(c) => c.trials = n,
            ExperimentConfig::AjiveValidate(c) => c.seeds = n,
            ExperimentConfig::TheoryCheck(c) => {
                c.envelope.trials = n;
                c.containment.runs = n;
                c.rms.runs = n;
            }
            ExperimentConfig::PartitionStats(c) => c.seeds = n,
        }
        Ok(())
    }
}

fn parse<T: DeserializeOwned>(value: Value) -> Result<T, Diagnostic> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        let path = if path == "." {
            "config".to_string()
        } else {
            format!("config.{path}")
        };
        Diagnostic::new(path, e.into_inner().to_string())
    })
}

/// A fully resolved run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSpec {
    pub config: ExperimentConfig,
    pub master_seed: u64,
    pub output_dir: PathBuf,
    pub write_fixtures: bool,
}

impl RunSpec {
    pub fn experiment(&self) -> Experiment {
        self.config.experiment()
    }

    /// The document this spec resolves to, with every default filled in.
    pub fn resolved_document(&self) -> Value {
        let mut doc = Map::new();
        doc.insert("experiment".into(), Value::from(self.experiment().tag()));
        doc.insert("master_seed".into(), Value::from(self.master_seed));
        doc.insert("write_fixtures".into(), Value::from(self.write_fixtures));
        doc.insert("config".into(), self.config.to_value());
        Value::Object(doc)
    }
}

/// Command-line values that take precedence over the document.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub trials: Option<usize>,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Diagnostic {
    /// Dotted location in the document, e.g. `config.fed.participants`.
    pub path: String,
    pub message: String,
}

impl Diagnostic {
    pub fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        Diagnostic {
            path: path.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

/// Schema and consistency problems in `doc`; empty when it is valid.
pub fn validate_config(doc: &Value) -> Vec<Diagnostic> {
    match resolve(doc, &Overrides::default()) {
        Ok(_) => Vec::new(),
        Err(diags) => diags,
    }
}

const TOP_LEVEL_KEYS: [&str; 5] = ["experiment", "master_seed", "write_fixtures", "output_dir", "config"];

/// Resolves `doc` plus `overrides` into a runnable spec.
pub fn resolve(doc: &Value, overrides: &Overrides) -> Result<RunSpec, Vec<Diagnostic>> {
    let mut diags = Vec::new();
    let Some(top) = doc.as_object() else {
        return Err(vec![Diagnostic::new("", format!("expected an object, found {}", kind(doc)))]);
    };
    for key in top.keys().filter(|k| !TOP_LEVEL_KEYS.contains(&k.as_str())) {
        diags.push(unknown_key(key, key, &TOP_LEVEL_KEYS));
    }

    let experiment = match top.get("experiment") {
        None => {
            diags.push(Diagnostic::new("experiment", "missing required key"));
            None
        }
        Some(Value::String(tag)) => {
            let e = Experiment::from_tag(tag);
            if e.is_none() {
                let names: Vec<&str> = Experiment::ALL.iter().map(|e| e.tag()).collect();
                diags.push(Diagnostic::new(
                    "experiment",
                    format!("unknown experiment `{tag}`, expected one of: {}", names.join(", ")),
                ));
            }
            e
        }
        Some(other) => {
            diags.push(Diagnostic::new("experiment", format!("expected a string, found {}", kind(other))));
            None
        }
    };

    let master_seed = match top.get("master_seed") {
        None => 0,
        Some(v) => v.as_u64().unwrap_or_else(|| {
            diags.push(Diagnostic::new(
                "master_seed",
                format!("expected a nonnegative integer, found {}", kind(v)),
            ));
            0
        }),
    };
    let write_fixtures = match top.get("write_fixtures") {
        None => false,
        Some(v) => v.as_bool().unwrap_or_else(|| {
            diags.push(Diagnostic::new("write_fixtures", format!("expected a boolean, found {}", kind(v))));
            false
        }),
    };
    let output_dir = match top.get("output_dir") {
        None => PathBuf::from("out"),
        Some(Value::String(s)) => PathBuf::from(s),
        Some(v) => {
            diags.push(Diagnostic::new("output_dir", format!("expected a string, found {}", kind(v))));
            PathBuf::new()
        }
    };
    let mut config_doc = match top.get("config") {
        None | Some(Value::Null) => Value::Object(Map::new()),
        Some(v @ Value::Object(_)) => v.clone(),
        Some(v) => {
            diags.push(Diagnostic::new("config", format!("expected an object, found {}", kind(v))));
            Value::Object(Map::new())
        }
    };

    let Some(experiment) = experiment else {
        return Err(diags);
    };
    if experiment == Experiment::Federated {
        inherit_task_settings(&mut config_doc);
    }
    let schema = ExperimentConfig::default_for(experiment).to_value();
    check_shape(&schema, &config_doc, "config", &mut diags);
    if !diags.is_empty() {
        return Err(diags);
    }

    let mut config = ExperimentConfig::from_value(experiment, config_doc).map_err(|d| vec![d])?;
    let master_seed = overrides.seed.unwrap_or(master_seed);
    if let ExperimentConfig::Federated(c) = &mut config {
        c.fed.master_seed = master_seed;
    }
    if let Some(n) = overrides.trials {
        config.set_trials(n).map_err(|d| vec![d])?;
    }
    check_semantics(&config, master_seed, &mut diags);
    if !diags.is_empty() {
        return Err(diags);
    }
    Ok(RunSpec {
        config,
        master_seed,
        output_dir: overrides.out.clone().unwrap_or(output_dir),
        write_fixtures,
    })
}

/// Lets `task.clients` and `task.weights` follow the `fed` section.
fn inherit_task_settings(config: &mut Value) {
    let Some(obj) = config.as_object_mut() else { return };
    let fed = obj.get("fed").and_then(Value::as_object);
    let clients = fed.and_then(|f| f.get("num_clients")).cloned();
    let weights = fed.and_then(|f| f.get("client_weights")).cloned();
    let task = obj.entry("task").or_insert_with(|| Value::Object(Map::new()));
    let Some(task) = task.as_object_mut() else { return };
    if let Some(c) = clients {
        task.entry("clients").or_insert(c);
    } else {
        task.entry("clients")
            .or_insert_with(|| Value::from(FedConfig::default().num_clients));
    }
    if let Some(w) = weights {
        task.entry("weights").or_insert(w);
    }
}

fn kind(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "a boolean",
        Value::Number(n) if n.is_u64() => "a nonnegative integer",
        Value::Number(n) if n.is_i64() => "a negative integer",
        Value::Number(_) => "a number",
        Value::String(_) => "a string",
        Value::Array(_) => "an array",
        Value::Object(_) => "an object",
    }
}

fn unknown_key(path: &str, key: &str, allowed: &[&str]) -> Diagnostic {
    Diagnostic::new(path, format!("unknown key `{key}`, expected one of: {}", allowed.join(", ")))
}

/// Compares `actual` against the serialized defaults in `schema`: reports
/// unknown keys and values whose JSON kind differs. `null` on either side is
/// left to the typed parse.
fn check_shape(schema: &Value, actual: &Value, path: &str, diags: &mut Vec<Diagnostic>) {
    match (schema, actual) {
        (Value::Null, _) | (_, Value::Null) => {}
        (Value::Object(s), Value::Object(a)) => {
            let allowed: Vec<&str> = s.keys().map(String::as_str).collect();
            for (key, value) in a {
                let child = format!("{path}.{key}");
                match s.get(key) {
                    Some(expected) => check_shape(expected, value, &child, diags),
                    None => diags.push(unknown_key(&child, key, &allowed)),
                }
            }
        }
        (Value::Array(s), Value::Array(a)) => {
            if let Some(first) = s.first() {
                for (i, value) in a.iter().enumerate() {
                    check_shape(first, value, &format!("{path}[{i}]"), diags);
                }
            }
        }
        (Value::Number(s), Value::Number(a)) => {
            if s.is_u64() && !a.is_u64() {
                diags.push(Diagnostic::new(
                    path,
                    format!("expected a nonnegative integer, found {}", kind(actual)),
                ));
            }
        }
        (Value::Bool(_), Value::Bool(_)) | (Value::String(_), Value::String(_)) => {}
        _ => {
            let expected = match schema {
                Value::Number(n) if n.is_u64() => "a nonnegative integer",
                other => kind(other),
            };
            diags.push(Diagnostic::new(path, format!("expected {expected}, found {}", kind(actual))));
        }
    }
}

fn positive(x: f64) -> bool {
    x > 0.0 && x.is_finite()
}

/// Seed tags shared with the experiment runners.
pub(crate) const TAG_TASK: u64 = 0x7461_736b;
pub(crate) const TAG_INIT: u64 = 0x696e_6974;
pub(crate) const TAG_TRIALS: u64 = 0x7472_6961;
pub(crate) const TAG_VIEWS: u64 = 0x7669_6577;
pub(crate) const TAG_ENVELOPE: u64 = 0x656e_766c;
pub(crate) const TAG_ENSEMBLE: u64 = 0x656e_736d;
pub(crate) const TAG_RUNS: u64 = 0x7275_6e73;
pub(crate) const TAG_PARTITION: u64 = 0x7061_7274;

fn check_semantics(config: &ExperimentConfig, master_seed: u64, diags: &mut Vec<Diagnostic>) {
    let mut push = |path: &str, msg: String| diags.push(Diagnostic::new(path, msg));
    match config {
        ExperimentConfig::Federated(c) => {
            if let Err(e) = c.fed.validate() {
                push("config.fed", e.to_string());
            }
            if c.task.clients != c.fed.num_clients {
                push(
                    "config.task.clients",
                    format!("task has {} clients, fed.num_clients is {}", c.task.clients, c.fed.num_clients),
                );
            }
            if !(c.init_std >= 0.0 && c.init_std.is_finite()) {
                push("config.init_std", "must be a nonnegative number".into());
            }
            let seed = c.task_seed.unwrap_or_else(|| derive_seed(master_seed, TAG_TASK));
            if let Err(e) = QuadEnsemble::generate(&c.task, seed) {
                push("config.task", e.to_string());
            }
        }
        ExperimentConfig::Landscape(c) => {
            if let Err(e) = SoftminLandscape::new(&c.landscape) {
                push("config.landscape", e.to_string());
            }
            if c.trial.rank == 0 || c.trial.rank > c.landscape.dim {
                push("config.trial.rank", format!("must lie in 1..={}", c.landscape.dim));
            }
            if !positive(c.trial.lr) {
                push("config.trial.lr", "must be positive".into());
            }
            if c.trials == 0 {
                push("config.trials", "must be positive".into());
            }
            if c.methods.is_empty() {
                push("config.methods", "must name at least one method".into());
            }
        }
        ExperimentConfig::AjiveValidate(c) => {
            if c.data.rows < 5 || c.data.cols < 5 {
                push("config.data", "rows and cols must be at least 5".into());
            }
            if c.data.shared_rank == 0 {
                push("config.data.shared_rank", "must be positive".into());
            }
            if c.client_counts.is_empty() || c.client_counts.contains(&0) {
                push("config.client_counts", "must be a nonempty list of positive counts".into());
            }
            if c.seeds == 0 {
                push("config.seeds", "must be positive".into());
            }
            if c.joint_rank == 0 || c.joint_rank > c.data.rows.min(c.data.cols) {
                push("config.joint_rank", format!("must lie in 1..={}", c.data.rows.min(c.data.cols)));
            }
        }
        ExperimentConfig::TheoryCheck(c) => {
            if c.checks.is_empty() {
                push("config.checks", "must name at least one check".into());
            }
            if let Err(e) = c.envelope.params.validate() {
                push("config.envelope.params", e.to_string());
            }
            if c.envelope.trials == 0 {
                push("config.envelope.trials", "must be positive".into());
            }
            if !(c.envelope.confidence > 0.0 && c.envelope.confidence < 1.0) {
                push("config.envelope.confidence", "must lie in (0, 1)".into());
            }
            let k = &c.containment;
            if k.ensemble.clip.is_none() {
                push("config.containment.ensemble.clip", "containment checks need a clip threshold".into());
            }
            if k.runs == 0 {
                push("config.containment.runs", "must be positive".into());
            }
            if k.optimizers.is_empty() {
                push("config.containment.optimizers", "must name at least one optimizer".into());
            }
            if k.bias_v.is_empty() || k.bias_v.iter().any(|b| !(*b >= 0.0 && b.is_finite())) {
                push("config.containment.bias_v", "must be a nonempty list of nonnegative numbers".into());
            }
            match QuadEnsemble::generate(&k.ensemble, derive_seed(master_seed, TAG_ENSEMBLE)) {
                Err(e) => push("config.containment.ensemble", e.to_string()),
                Ok(ens) if ens.clip.is_some() => {
                    for &b in &k.bias_v {
                        match k.params(&ens, b).and_then(|p| p.validate().map(|_| p)) {
                            Err(e) => push("config.containment", e.to_string()),
                            Ok(p) if p.step_size_product() > 0.5 => push(
                                "config.containment.lr",
                                format!("lr * L * steps = {} exceeds 1/2", p.step_size_product()),
                            ),
                            Ok(_) => {}
                        }
                    }
                }
                Ok(_) => {}
            }
            let r = &c.rms;
            if r.ensemble.clip.is_some() {
                push("config.rms.ensemble.clip", "the in-expectation check runs without clipping".into());
            }
            if r.ensemble.weights.is_some() {
                push("config.rms.ensemble.weights", "the in-expectation check uses uniform weights".into());
            }
            if r.runs == 0 || r.steps == 0 {
                push("config.rms", "runs and steps must be positive".into());
            }
            match QuadEnsemble::generate(&r.ensemble, derive_seed(master_seed, TAG_ENSEMBLE)) {
                Err(e) => push("config.rms.ensemble", e.to_string()),
                Ok(ens) => {
                    let p = r.params(&ens);
                    if let Err(e) = p.validate() {
                        push("config.rms", e.to_string());
                    } else if p.step_size_product() > 1.0 / 6.0 {
                        push(
                            "config.rms.lr",
                            format!("lr * L * steps = {} exceeds 1/6", p.step_size_product()),
                        );
                    }
                }
            }
        }
        ExperimentConfig::PartitionStats(c) => {
            let d = &c.dirichlet;
            if !positive(d.alpha) {
                push("config.dirichlet.alpha", format!("must be positive, got {}", d.alpha));
            }
            if d.clients == 0 {
                push("config.dirichlet.clients", "must be positive".into());
            }
            if d.classes == 0 {
                push("config.dirichlet.classes", "must be positive".into());
            }
            if d.classes * d.samples_per_class < d.clients {
                push("config.dirichlet.samples_per_class", "fewer samples than clients".into());
            }
            if c.seeds == 0 {
                push("config.seeds", "must be positive".into());
            }
            if !(0.0..1.0).contains(&c.active_threshold) {
                push("config.active_threshold", "must lie in [0, 1)".into());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn paths(diags: &[Diagnostic]) -> Vec<&str> {
        diags.iter().map(|d| d.path.as_str()).collect()
    }

    #[test]
    fn minimal_documents_are_valid() {
        for e in Experiment::ALL {
            let diags = validate_config(&json!({ "experiment": e.tag() }));
            assert!(diags.is_empty(), "{e:?}: {diags:?}");
        }
    }

    #[test]
    fn participants_above_clients_is_reported() {
        let doc = json!({
            "experiment": "federated",
            "config": { "fed": { "num_clients": 4, "participants": 6 } }
        });
        let diags = validate_config(&doc);
        assert_eq!(diags.len(), 1, "{diags:?}");
        assert!(diags[0].message.contains("participants exceed clients"));
    }

    #[test]
    fn nonpositive_alpha_is_reported_on_its_path() {
        for alpha in [0.0, -1.0] {
            let doc = json!({ "experiment": "partition_stats", "config": { "dirichlet": { "alpha": alpha } } });
            assert_eq!(paths(&validate_config(&doc)), ["config.dirichlet.alpha"]);
        }
    }

    #[test]
    fn unknown_keys_are_all_listed() {
        let doc = json!({
            "experiment": "federated",
            "colour": 1,
            "config": { "fed": { "lr": 0.1, "lerning_rate": 0.1 }, "extra": true }
        });
        let diags = validate_config(&doc);
        let mut p = paths(&diags);
        p.sort();
        assert_eq!(p, ["colour", "config.extra", "config.fed.lerning_rate"]);
    }

    #[test]
    fn kind_mismatches_name_the_expected_type() {
        let doc = json!({
            "experiment": "landscape",
            "config": { "trials": 2.5, "trial": { "lr": "fast" }, "methods": [1] }
        });
        let diags = validate_config(&doc);
        let mut p = paths(&diags);
        p.sort();
        assert_eq!(p, ["config.methods[0]", "config.trial.lr", "config.trials"]);
        assert!(diags.iter().any(|d| d.message.contains("expected a nonnegative integer")));
    }

    #[test]
    fn bad_enum_values_report_their_path() {
        let doc = json!({ "experiment": "federated", "config": { "fed": { "sync_mode": "sometimes" } } });
        let diags = validate_config(&doc);
        assert_eq!(paths(&diags), ["config.fed.sync_mode"]);
        assert!(diags[0].message.contains("unknown variant"));
    }

    #[test]
    fn missing_or_unknown_experiment() {
        assert_eq!(paths(&validate_config(&json!({}))), ["experiment"]);
        assert_eq!(paths(&validate_config(&json!({ "experiment": "nope" }))), ["experiment"]);
        assert_eq!(paths(&validate_config(&json!([1, 2]))), [""]);
    }

    #[test]
    fn task_follows_fed_clients() {
        let doc = json!({ "experiment": "federated", "config": { "fed": { "num_clients": 3, "participants": 2 } } });
        let spec = resolve(&doc, &Overrides::default()).unwrap();
        let ExperimentConfig::Federated(c) = spec.config else { panic!() };
        assert_eq!(c.task.clients, 3);
        let doc = json!({
            "experiment": "federated",
            "config": { "fed": { "num_clients": 3, "participants": 2 }, "task": { "clients": 5 } }
        });
        assert_eq!(paths(&validate_config(&doc)), ["config.task.clients"]);
    }

    #[test]
    fn overrides_take_precedence() {
        let doc = json!({ "experiment": "landscape", "master_seed": 3, "output_dir": "a" });
        let ov = Overrides {
            seed: Some(9),
            trials: Some(17),
            out: Some(PathBuf::from("b")),
        };
        let spec = resolve(&doc, &ov).unwrap();
        assert_eq!(spec.master_seed, 9);
        assert_eq!(spec.output_dir, PathBuf::from("b"));
        let ExperimentConfig::Landscape(c) = &spec.config else { panic!() };
        assert_eq!(c.trials, 17);

        let fed = json!({ "experiment": "federated" });
        let err = resolve(&fed, &Overrides { trials: Some(3), ..Overrides::default() }).unwrap_err();
        assert_eq!(paths(&err), ["--trials"]);
    }

    #[test]
    fn resolved_document_resolves_to_itself() {
        let doc = json!({ "experiment": "theory_check", "master_seed": 5, "config": { "rms": { "runs": 10 } } });
        let spec = resolve(&doc, &Overrides::default()).unwrap();
        let again = resolve(&spec.resolved_document(), &Overrides::default()).unwrap();
        assert_eq!(spec.config, again.config);
        assert_eq!(spec.master_seed, again.master_seed);
    }

    #[test]
    fn theory_step_size_conditions_are_checked() {
        let doc = json!({ "experiment": "theory_check", "config": { "containment": { "lr": 1.0 } } });
        assert_eq!(paths(&validate_config(&doc)), ["config.containment.lr"; 3]);
        let doc = json!({ "experiment": "theory_check", "config": { "rms": { "lr": 1.0 } } });
        assert_eq!(paths(&validate_config(&doc)), ["config.rms.lr"]);
    }
}
