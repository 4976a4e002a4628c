//! `autobid`: generate markets, run mechanism comparisons, train the PPO
//! controller and export plot data.
//!
//! On failure a single JSON line `{"error": <kind>, "message": <text>}` is
//! written to stderr and the process exits nonzero.

use std::path::PathBuf;
use std::process::ExitCode;

use autobid_core::experiment::{
    generate_command, preset, report_command, run_experiment, train_command, ExperimentConfig, ExperimentError,
    RunOptions,
};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "autobid", version, about = "Autobidding mechanism simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML). `preset:<desk|sparse|toy>` selects a built-in one.
    #[arg(long)]
    config: String,
    /// Output directory; overrides the config's `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run this seed only.
    #[arg(long)]
    seed: Option<u64>,
    /// Keep only this mechanism (`CFP`, `DFP`, `DFP-debt`, ...).
    #[arg(long)]
    mechanism: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the market log of each seed as CSV.
    Generate(Common),
    /// Simulate every seed × mechanism and write the analysis tables.
    Run(Common),
    /// Train the PPO payment controller; writes checkpoint, curve and evaluation.
    Train(Common),
    /// Turn a finished run directory into plot-data CSVs.
    Report {
        /// Artifact directory written by `run`.
        #[arg(long)]
        out: PathBuf,
    },
}

fn load(spec: &str) -> Result<ExperimentConfig, ExperimentError> {
    match spec.strip_prefix("preset:") {
        Some(name) => preset(name).ok_or_else(|| ExperimentError::Config(format!("--config: unknown preset `{name}`"))),
        None => ExperimentConfig::load(std::path::Path::new(spec)),
    }
}

fn options(c: &Common) -> RunOptions {
    RunOptions {
        out: c.out.clone(),
        seed: c.seed,
        mechanism: c.mechanism.clone(),
    }
}

fn kind(e: &ExperimentError) -> (&'static str, u8) {
    match e {
        ExperimentError::Config(_) | ExperimentError::Parse(_) => ("config", 2),
        ExperimentError::ControllerFault { .. } => ("controller_fault", 3),
        ExperimentError::Missing(_) => ("missing_artifact", 4),
        ExperimentError::Io { .. } => ("io", 5),
        _ => ("runtime", 1),
    }
}

fn run(cli: Cli) -> Result<(), ExperimentError> {
    match cli.command {
        Command::Generate(c) => {
            for p in generate_command(&load(&c.config)?, &options(&c))? {
                println!("{}", p.display());
            }
        }
        Command::Run(c) => {
            let dir = run_experiment(&load(&c.config)?, &options(&c))?;
            println!("{}", dir.display());
        }
        Command::Train(c) => {
            let a = train_command(&load(&c.config)?, &options(&c))?;
            for p in [a.checkpoint, a.curve, a.eval] {
                println!("{}", p.display());
            }
        }
        Command::Report { out } => {
            for p in report_command(&out)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (k, code) = kind(&e);
            eprintln!("{}", serde_json::json!({ "error": k, "message": e.to_string() }));
            ExitCode::from(code)
        }
    }
}
