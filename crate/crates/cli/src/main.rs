//! `morallens` — file-based pipeline driver.
//!
//! Subcommands: `synth` (generate a verification cohort), `score` (survey
//! scoring and labelling), `evaluate` (the attribute x modality table),
//! `experiment activity|quality` (the two sensitivity studies), and
//! `importance` (ranked features of a saved model). All randomness flows
//! from the `--seed` flag; reruns with the same inputs and seed produce
//! byte-identical outputs. Set `MORALLENS_LOG=info` for progress chatter.

mod commands;
mod config;
mod manifest;
mod stage;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use manifest::Manifest;

#[derive(Parser)]
#[command(name = "morallens", version, about)]
struct Cli {
    /// Worker threads for independent work units; results are identical for
    /// any value.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort (behaviour logs, survey, ledger).
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a survey file into continuous scores and target labels.
    Score {
        #[arg(long)]
        surveys: PathBuf,
        #[arg(long)]
        keying: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cross-validated weighted AUROC for each target x predictor view.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sensitivity studies over data quantity and quality.
    Experiment {
        #[command(subcommand)]
        study: Study,
    },
    /// Ranked feature importances of a saved model file.
    Importance {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum Study {
    /// Activity-bin study: capped training sets per cumulative activity bin.
    Activity {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Override the config's predictor view
        /// (desktop|mobile-web|mobile-apps|fused).
        #[arg(long)]
        modality: Option<String>,
    },
    /// Quality study: ranked vs random per-user feature selection.
    Quality {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        modality: Option<String>,
    },
}

fn log_enabled() -> bool {
    std::env::var("MORALLENS_LOG")
        .map(|v| !v.is_empty() && v != "off" && v != "0")
        .unwrap_or(false)
}

pub(crate) fn log_line(msg: &str) {
    if log_enabled() {
        eprintln!("[morallens] {msg}");
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let started = std::time::Instant::now();
    let (out_dir, mut man, result) = match &cli.command {
        Command::Synth { config, seed, out } => (
            out.clone(),
            Manifest::new("synth", Some(*seed), cli.jobs),
            commands::synth::run(config, *seed, out),
        ),
        Command::Score {
            surveys,
            keying,
            out,
        } => (
            out.clone(),
            Manifest::new("score", None, cli.jobs),
            commands::score::run(surveys, keying.as_deref(), out),
        ),
        Command::Evaluate { config, seed, out } => (
            out.clone(),
            Manifest::new("evaluate", Some(*seed), cli.jobs),
            commands::evaluate::run(config, *seed, out, cli.jobs),
        ),
        Command::Experiment { study } => match study {
            Study::Activity {
                config,
                seed,
                out,
                modality,
            } => (
                out.clone(),
                Manifest::new("experiment activity", Some(*seed), cli.jobs),
                commands::activity::run(config, *seed, out, cli.jobs, modality.as_deref()),
            ),
            Study::Quality {
                config,
                seed,
                out,
                modality,
            } => (
                out.clone(),
                Manifest::new("experiment quality", Some(*seed), cli.jobs),
                commands::quality::run(config, *seed, out, cli.jobs, modality.as_deref()),
            ),
        },
        Command::Importance { model, out } => (
            out.clone(),
            Manifest::new("importance", None, cli.jobs),
            commands::importance::run(model, out),
        ),
    };

    let code = match result {
        Ok(outcome) => {
            man.absorb(outcome);
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("error: {err:#}");
            man.fatal_errors.push(format!("{err:#}"));
            ExitCode::FAILURE
        }
    };
    man.timing_ms = started.elapsed().as_millis();
    if let Err(err) = man.write(&out_dir) {
        eprintln!("error: could not write manifest: {err}");
        return ExitCode::FAILURE;
    }
    code
}
