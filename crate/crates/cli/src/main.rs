//! `bmc`: bridge preference pairs, annotate diffs, train, and inspect the
//! result.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::{RunConfig, CONFIG_KEYS};
use crate::error::CliError;

#[derive(Parser, Debug)]
#[command(name = "bmc", version, about = "Preference-pair bridging and direct preference training")]
#[command(after_help = CONFIG_KEYS)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct GlobalArgs {
    /// TOML run configuration.
    #[arg(long, short = 'c', global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override one config key, e.g. `--set objective.beta=0.1`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Root seed (`seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Input records (`paths.dataset`).
    #[arg(long, global = true, value_name = "FILE")]
    dataset: Option<PathBuf>,

    /// Output file (`paths.output`).
    #[arg(long, short = 'o', global = true, value_name = "FILE")]
    output: Option<PathBuf>,

    /// Run directory (`paths.run_dir`).
    #[arg(long, global = true, value_name = "DIR")]
    run_dir: Option<PathBuf>,

    /// Policy checkpoint (`paths.policy`).
    #[arg(long, global = true, value_name = "FILE")]
    policy: Option<PathBuf>,

    /// Reference checkpoint (`paths.reference`).
    #[arg(long, global = true, value_name = "FILE")]
    reference: Option<PathBuf>,

    /// JSONL report file (`paths.report`).
    #[arg(long, global = true, value_name = "FILE")]
    report: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Create pseudo-winning responses with the configured backend and
    /// annotate diffs.
    #[command(after_help = CONFIG_KEYS)]
    Bridge {
        /// Fraction of records to modify (`experiment.proportion`).
        #[arg(long, short = 'p')]
        proportion: Option<f64>,
    },
    /// Annotate every record with its token diff sets.
    #[command(after_help = CONFIG_KEYS)]
    Diff,
    /// Train a policy and write checkpoints plus a JSONL log to the run
    /// directory.
    #[command(after_help = CONFIG_KEYS)]
    Train,
    /// Report reward margins, accuracy, KL, token rewards and span
    /// statistics of a policy against a reference.
    #[command(after_help = CONFIG_KEYS)]
    Analyze,
    /// Compare analytic and finite-difference gradients; exits 3 above
    /// tolerance.
    #[command(after_help = CONFIG_KEYS)]
    Gradcheck,
    /// Train one model per edit-distance split and report gradient norms.
    #[command(name = "split-experiment", after_help = CONFIG_KEYS)]
    SplitExperiment,
    /// Write a synthetic copy-task dataset.
    #[command(after_help = CONFIG_KEYS)]
    Generate,
}

impl GlobalArgs {
    /// Flags as overrides, applied after the file and any `--set`.
    fn overrides(&self) -> Vec<String> {
        let mut out = self.set.clone();
        let quote = |p: &PathBuf| toml::Value::String(p.to_string_lossy().into_owned()).to_string();
        if let Some(s) = self.seed {
            out.push(format!("seed={s}"));
        }
        for (key, value) in [
            ("paths.dataset", &self.dataset),
            ("paths.output", &self.output),
            ("paths.run_dir", &self.run_dir),
            ("paths.policy", &self.policy),
            ("paths.reference", &self.reference),
            ("paths.report", &self.report),
        ] {
            if let Some(p) = value {
                out.push(format!("{key}={}", quote(p)));
            }
        }
        out
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut overrides = cli.global.overrides();
    if let Command::Bridge {
        proportion: Some(p),
    } = &cli.command
    {
        overrides.push(format!("experiment.proportion={p}"));
    }
    let config = RunConfig::load(cli.global.config.as_deref(), &overrides)?;
    match cli.command {
        Command::Bridge { .. } => commands::bridge(&config),
        Command::Diff => commands::diff(&config),
        Command::Train => commands::train(&config),
        Command::Analyze => commands::analyze(&config),
        Command::Gradcheck => commands::gradcheck(&config),
        Command::SplitExperiment => commands::split_experiment(&config),
        Command::Generate => commands::generate(&config),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
