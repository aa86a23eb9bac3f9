use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fedlr_cli::{load_document, resolve, run, CliError, Diagnostic, Overrides, EXIT_OK};

#[derive(Parser)]
#[command(name = "fedlr", version, about = "Federated low-rank training simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a config document.
    Run(RunArgs),
    /// Check a config document and print its diagnostics.
    Validate(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// JSON run document.
    #[arg(long)]
    config: PathBuf,
    /// Master seed; overrides `master_seed` in the document.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `output_dir` in the document.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Monte Carlo trials or seeds, for experiments that have them.
    #[arg(long)]
    trials: Option<usize>,
}

impl RunArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            trials: self.trials,
            out: self.out.clone(),
        }
    }
}

/// Sizes the global rayon pool from `FEDLR_THREADS` when it is set.
fn init_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("FEDLR_THREADS") else {
        return Ok(());
    };
    let bad = || CliError::Config(vec![Diagnostic::new("FEDLR_THREADS", format!("expected a positive integer, got `{raw}`"))]);
    let n: usize = raw.trim().parse().map_err(|_| bad())?;
    if n == 0 {
        return Err(bad());
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(vec![Diagnostic::new("FEDLR_THREADS", e.to_string())]))
}

fn execute(command: &Command) -> Result<u8, CliError> {
    match command {
        Command::Validate(args) => {
            let doc = load_document(&args.config)?;
            resolve(&doc, &args.overrides()).map_err(CliError::Config)?;
            println!("{}: valid", args.config.display());
            Ok(EXIT_OK)
        }
        Command::Run(args) => {
            init_threads()?;
            let doc = load_document(&args.config)?;
            let spec = resolve(&doc, &args.overrides()).map_err(CliError::Config)?;
            let outcome = run(&spec)?;
            println!(
                "{} {} seed {} -> {} [{}]",
                outcome.summary.experiment,
                &outcome.summary.config_hash[..12],
                outcome.summary.master_seed,
                outcome.output_dir.display(),
                outcome.summary.status
            );
            Ok(outcome.exit_code())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
