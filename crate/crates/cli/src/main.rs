use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use ldp_fusion::experiment::{describe_datasets, run_experiment, validate_config, ExperimentConfig};

/// Pool LDP releases from several services and estimate means and histograms.
#[derive(Parser)]
#[command(name = "ldp-fusion", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write per-trial and summary CSVs.
    Run {
        config: PathBuf,
        /// Root seed (overrides the config).
        #[arg(long)]
        seed: Option<u64>,
        /// Number of trials (overrides the config).
        #[arg(long)]
        trials: Option<usize>,
        /// Per-trial CSV path (overrides the config).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a config and list every problem found.
    Validate { config: PathBuf },
    /// Built-in datasets.
    Datasets {
        #[command(subcommand)]
        action: DatasetsAction,
    },
}

#[derive(Subcommand)]
enum DatasetsAction {
    /// Describe the available datasets.
    Describe,
}

fn load(path: &PathBuf) -> anyhow::Result<ExperimentConfig> {
    ExperimentConfig::load(path).with_context(|| format!("cannot load {}", path.display()))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Run { config, seed, trials, out } => {
            let mut cfg = load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(t) = trials {
                cfg.trials = t;
            }
            if let Some(o) = out {
                cfg.output = Some(o);
            }
            let problems = validate_config(&cfg);
            if !problems.is_empty() {
                for p in &problems {
                    eprintln!("invalid: {p}");
                }
                bail!("{} has {} problem(s)", config.display(), problems.len());
            }
            let out = cfg.output.clone().unwrap_or_else(|| PathBuf::from(format!("{}.csv", cfg.name)));
            let report = run_experiment(&cfg)?;
            let summary = report.write_outputs(&out)?;
            println!("{:<10} {:<10} {:<24} {:<8} {:>6} {:>14}", "scenario", "estimator", "eps", "metric", "trials", "value");
            for r in &report.summary {
                println!(
                    "{:<10} {:<10} {:<24} {:<8} {:>6} {:>14.6e}",
                    r.scenario,
                    r.estimator,
                    r.eps_label,
                    r.metric.summary_name(),
                    r.trials,
                    r.value
                );
            }
            println!("wrote {} rows to {}", report.rows.len(), out.display());
            println!("wrote {} summary rows to {}", report.summary.len(), summary.display());
        }
        Command::Validate { config } => {
            let cfg = load(&config)?;
            let problems = validate_config(&cfg);
            if !problems.is_empty() {
                for p in &problems {
                    eprintln!("invalid: {p}");
                }
                bail!("{} has {} problem(s)", config.display(), problems.len());
            }
            println!("{}: ok", config.display());
        }
        Command::Datasets { action: DatasetsAction::Describe } => print!("{}", describe_datasets()),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
