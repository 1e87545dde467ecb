//! `dpsynth`: fit a private generator, sample synthetic rows, and score
//! synthetic data against a marginal workload.

mod config;
mod evaluate;
mod fit;
mod generate;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dpsynth_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "dpsynth",
    version,
    about = "Differentially private synthetic tabular data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a private generator to a CSV dataset.
    Fit {
        /// Run configuration JSON.
        #[arg(long)]
        config: PathBuf,
        /// Resume from the checkpoint file named in outputs.checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Sample synthetic rows from a fitted model into a CSV.
    Generate {
        /// Fitted model JSON.
        #[arg(long)]
        model: PathBuf,
        /// Output row count; defaults to the fitted dataset's size.
        #[arg(long)]
        rows: Option<usize>,
        /// Sampling seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare two CSVs' marginal distributions over a workload.
    Evaluate {
        /// Reference CSV.
        #[arg(long)]
        real: PathBuf,
        /// Synthetic CSV, encoded under the reference schema.
        #[arg(long)]
        synth: PathBuf,
        /// Workload: inline JSON ({"all_k_way": k} or [["col","col"],..])
        /// or a path to a JSON file holding the same.
        #[arg(long)]
        workload: String,
        /// Schema source: a model JSON, a schema JSON, or a preprocessing
        /// spec. Defaults to inferring one from the real CSV.
        #[arg(long)]
        schema: Option<PathBuf>,
        /// Also write the metrics JSON here (stdout always gets it).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// DPSYNTH_SEED overrides any configured or flag-passed seed.
fn env_seed() -> Result<Option<u64>> {
    match std::env::var("DPSYNTH_SEED") {
        Ok(text) => text
            .trim()
            .parse::<u64>()
            .map(Some)
            .map_err(|_| Error::config(format!("DPSYNTH_SEED must be an integer, got `{text}`"))),
        Err(_) => Ok(None),
    }
}

/// DPSYNTH_THREADS caps the worker pool (1 disables parallelism).
fn apply_thread_env() -> Result<()> {
    match std::env::var("DPSYNTH_THREADS") {
        Ok(text) => {
            let n = text.trim().parse::<usize>().map_err(|_| {
                Error::config(format!("DPSYNTH_THREADS must be an integer, got `{text}`"))
            })?;
            dpsynth_core::set_thread_count(n)
        }
        Err(_) => Ok(()),
    }
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Json(_) => 2,
        Error::Data(_) | Error::Io(_) | Error::Csv(_) => 3,
        Error::BudgetExhausted { .. } => 4,
        Error::Numeric(_) => 1,
    }
}

fn run(cli: Cli) -> Result<()> {
    apply_thread_env()?;
    let env_seed = env_seed()?;
    match cli.command {
        Command::Fit { config, resume } => fit::run(&config, resume, env_seed),
        Command::Generate {
            model,
            rows,
            seed,
            out,
        } => generate::run(&model, rows, env_seed.unwrap_or(seed), &out),
        Command::Evaluate {
            real,
            synth,
            workload,
            schema,
            out,
        } => evaluate::run(&real, &synth, &workload, schema.as_deref(), out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
