//! `ssmix`: prepare, train, predict, evaluate and benchmark the forecaster.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

mod commands;
mod config;
mod report;

use std::path::Path;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::{Overrides, RunConfig};

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Lib(ssmix::Error),
}

impl Failure {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Failure::Lib(ssmix::Error::Data { stage: "io", detail: format!("{}: {e}", path.display()) })
    }

    fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Lib(ssmix::Error::Numeric { .. } | ssmix::Error::NonConvergence { .. }) => 3,
            Failure::Lib(_) => 2,
        }
    }
}

impl From<ssmix::Error> for Failure {
    fn from(e: ssmix::Error) -> Self {
        Failure::Lib(e)
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "usage: {m}"),
            Failure::Lib(e) => write!(f, "{e}"),
        }
    }
}

#[derive(Parser)]
#[command(name = "ssmix", version, about = "State-space mixture forecaster for radio KPI logs")]
struct Cli {
    /// Log progress to stderr (RUST_LOG takes precedence)
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic KPI log as CSV
    Synth {
        /// Output CSV (defaults to the input path)
        #[arg(long)]
        out: Option<std::path::PathBuf>,
    },
    /// Clean, window, split and standardize a raw KPI log
    Prepare,
    /// Fit a model on a prepared dataset
    Train,
    /// Forecast from a saved model
    Predict {
        /// CSV of one lookback window in physical units (L rows, named columns)
        #[arg(long, conflicts_with = "split")]
        window_file: Option<std::path::PathBuf>,
        /// Dataset split to forecast: train | val | test
        #[arg(long)]
        split: Option<String>,
        /// Output CSV (defaults to <report-dir>/predictions.csv)
        #[arg(long)]
        out: Option<std::path::PathBuf>,
    },
    /// Score a saved model on the dataset's test tail
    Evaluate,
    /// Time forward passes over a grid of lookback lengths
    Bench,
    /// Print the resolved configuration as TOML
    Config,
    /// Check the schema version and digest of a JSON report
    Verify { report: std::path::PathBuf },
}

fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = RunConfig::resolve(&cli.overrides)?;
    match cli.command {
        Command::Synth { out } => commands::synth(&cfg, out.as_deref()),
        Command::Prepare => commands::prepare(&cfg),
        Command::Train => commands::train(&cfg),
        Command::Predict { window_file, split, out } => {
            commands::predict(&cfg, window_file.as_deref(), split.as_deref(), out.as_deref())
        }
        Command::Evaluate => commands::evaluate(&cfg),
        Command::Bench => commands::bench(&cfg),
        Command::Verify { report } => {
            let r = report::Report::<serde_json::Value>::read(&report, None)?;
            println!("{}: {} v{} ok", report.display(), r.schema, r.version);
            Ok(())
        }
        Command::Config => {
            print!("{}", toml::to_string(&cfg).map_err(|e| Failure::Usage(e.to_string()))?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
