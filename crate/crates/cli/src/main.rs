use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;
mod manifest;

use commands::Outcome;
use config::{parse_assignment, Config, ConfigError};
use manifest::RunManifest;

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERIC: u8 = 3;
const EXIT_DIVERGED: u8 = 4;

/// Masked-attention laboratory: synthetic banded-target fits, a tiny byte
/// language model, gradient checks and attention cost reports.
///
/// Exit status: 0 ok, 1 runtime error, 2 config error, 3 non-finite loss or
/// failed gradient check, 4 run completed but divergence was flagged.
#[derive(Parser)]
#[command(name = "lsattn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit softmax(QK^T + M) to a random banded target
    Synth(Common),
    /// Train the byte-level language model with logit telemetry
    TrainLm(Common),
    /// Cost model and wall-clock forward timing, vanilla vs LS
    Bench(Common),
    /// Finite-difference checks of every backward pass
    Gradcheck(Common),
    /// Attention FLOP and KV-cache table
    Flops(Common),
}

#[derive(Args)]
struct Common {
    /// Config file of `key = value` lines (a run manifest works too)
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one key; repeatable
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Output directory
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long, value_name = "N")]
    seed_data: Option<u64>,
    #[arg(long, value_name = "N")]
    seed_init: Option<u64>,
}

fn resolve(name: &str, c: &Common) -> Result<Config, ConfigError> {
    let sets = c
        .sets
        .iter()
        .map(|s| parse_assignment(s))
        .collect::<Result<Vec<_>, _>>()?;
    Config::resolve(name, c.config.as_deref(), &sets, c.seed_data, c.seed_init)
}

type Runner = fn(&Config, &Path) -> anyhow::Result<commands::Report>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, common, run): (&str, &Common, Runner) = match &cli.command {
        Command::Synth(c) => ("synth", c, commands::synth),
        Command::TrainLm(c) => ("train-lm", c, commands::train),
        Command::Bench(c) => ("bench", c, commands::bench),
        Command::Gradcheck(c) => ("gradcheck", c, commands::gradcheck),
        Command::Flops(c) => ("flops", c, commands::flops),
    };
    let cfg = match resolve(name, common) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("config error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    // Build typed configs up front so bad values fail before any compute.
    let early = match name {
        "synth" => commands::synth_config(&cfg).map(drop),
        "train-lm" => commands::lm_configs(&cfg).map(drop),
        _ => Ok(()),
    };
    if let Err(e) = early {
        eprintln!("config error: {e:#}");
        return ExitCode::from(EXIT_CONFIG);
    }
    let out = common
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs").join(name));
    let manifest = match RunManifest::begin(&out, name, &cfg) {
        Ok(m) => m,
        Err(e) => {
            eprintln!("cannot write manifest in {}: {e}", out.display());
            return ExitCode::from(EXIT_FAILURE);
        }
    };
    match run(&cfg, &out) {
        Ok(report) => {
            let mut outputs = report.outputs.clone();
            outputs.push(manifest.path().to_path_buf());
            if let Err(e) = manifest.finish(report.outcome.label(), &outputs, &report.extra) {
                eprintln!("cannot finalize manifest: {e}");
                return ExitCode::from(EXIT_FAILURE);
            }
            match report.outcome {
                Outcome::Ok => ExitCode::SUCCESS,
                Outcome::NonFinite | Outcome::CheckFailed => ExitCode::from(EXIT_NUMERIC),
                Outcome::Diverged => ExitCode::from(EXIT_DIVERGED),
            }
        }
        Err(e) => {
            let _ = manifest.finish(
                "error",
                &[],
                &[("error".into(), format!("{e:#}").replace('\n', " "))],
            );
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_FAILURE)
        }
    }
}
