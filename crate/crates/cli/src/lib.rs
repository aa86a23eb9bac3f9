//! Configuration-driven experiment runner for the fedlr simulator.
//!
//! A run reads a JSON document (see [`config`]), executes one experiment and
//! writes `metrics.csv`, `summary.json`, `timings.csv` and, on request,
//! `fixtures/*.json` into the output directory.

pub mod config;
pub mod experiments;
pub mod output;

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde_json::Value;
use thiserror::Error;

pub use config::{resolve, validate_config, Diagnostic, Experiment, ExperimentConfig, Overrides, RunSpec};
pub use experiments::{execute, Report};
pub use output::Summary;

pub const EXIT_OK: u8 = 0;
pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DIVERGED: u8 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration:\n{}", render(.0))]
    Config(Vec<Diagnostic>),
    #[error(transparent)]
    Run(#[from] fedlr_core::Error),
    #[error("{context}: {source}")]
    Io { context: String, source: io::Error },
}

fn render(diags: &[Diagnostic]) -> String {
    diags.iter().map(|d| format!("  {d}")).collect::<Vec<_>>().join("\n")
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        use fedlr_core::Error as E;
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Run(E::Diverged { .. } | E::NumericFailure { .. }) => EXIT_DIVERGED,
            CliError::Run(E::InvalidInput(_) | E::PreconditionViolation(_) | E::Unsupported(_)) => EXIT_CONFIG,
            CliError::Run(_) | CliError::Io { .. } => EXIT_FAILURE,
        }
    }
}

/// Reads and parses a JSON document; unreadable or malformed files are
/// configuration errors.
pub fn load_document(path: &Path) -> Result<Value, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(vec![Diagnostic::new(path.display().to_string(), e.to_string())]))?;
    serde_json::from_str(&text).map_err(|e| {
        CliError::Config(vec![Diagnostic::new(
            path.display().to_string(),
            format!("not valid JSON: {e}"),
        )])
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOutcome {
    pub summary: Summary,
    pub output_dir: PathBuf,
    pub diverged: bool,
}

impl RunOutcome {
    pub fn exit_code(&self) -> u8 {
        if self.diverged {
            EXIT_DIVERGED
        } else {
            EXIT_OK
        }
    }
}

/// Executes `spec` and writes its artifacts.
pub fn run(spec: &RunSpec) -> Result<RunOutcome, CliError> {
    let report = execute(spec)?;
    let resolved = spec.resolved_document();
    let summary = output::write_artifacts(&spec.output_dir, &resolved, spec.master_seed, spec.experiment().tag(), &report)
        .map_err(|source| CliError::Io {
            context: format!("writing artifacts to {}", spec.output_dir.display()),
            source,
        })?;
    Ok(RunOutcome {
        summary,
        output_dir: spec.output_dir.clone(),
        diverged: report.diverged,
    })
}

/// Resolves and runs a document in one call.
pub fn run_document(doc: &Value, overrides: &Overrides) -> Result<RunOutcome, CliError> {
    let spec = resolve(doc, overrides).map_err(CliError::Config)?;
    run(&spec)
}
