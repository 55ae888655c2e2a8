//! `setseq`: simulate contagion panels, fit Set-Sequence models, compare them
//! with the Kalman oracle and backtest the portfolio objective.
//!
//! Every command writes into its own output directory together with a
//! `manifest.json` of file hashes. Exit codes: 0 success, 2 configuration
//! error, 3 data error, 4 numerical failure.

mod commands;
mod config;
mod error;
mod manifest;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use setseq_core::kalman::KalmanVariant;
use setseq_core::mem::TrackingAllocator;
use setseq_core::model::SummaryVariant;

use commands::{Ctx, EpisodeFormat, Task};
use config::RunConfig;
use error::CliResult;

#[global_allocator]
static ALLOC: TrackingAllocator = TrackingAllocator;

#[derive(Debug, Parser)]
#[command(
    name = "setseq",
    version,
    about = "Set-Sequence models for panels of exchangeable units"
)]
struct Cli {
    /// JSON run configuration; omitted sections keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Seed for simulation, training and observation draws.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory [default: $SETSEQ_DATA_DIR/<command>].
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Run sweeps serially.
    #[arg(long, global = true)]
    deterministic: bool,

    /// Set summary used by the model.
    #[arg(long, global = true, value_parser = parse_variant)]
    variant: Option<SummaryVariant>,

    /// Kalman filter form for oracle comparisons.
    #[arg(long, global = true, value_parser = parse_kalman)]
    kalman_variant: Option<KalmanVariant>,

    /// Observed units for eval, probe and sweep-units.
    #[arg(long, global = true)]
    units: Option<usize>,

    /// Root for default output directories.
    #[arg(long, env = "SETSEQ_DATA_DIR", default_value = "setseq-data", hide = true)]
    data_dir: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate contagion episodes.
    Simulate {
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long, value_enum, default_value = "jsonl")]
        format: EpisodeFormat,
        /// Use the held-out evaluation streams.
        #[arg(long)]
        held_out: bool,
    },
    /// Kalman-oracle metrics across observed-unit counts, and filter paths.
    Kalman,
    /// Train a model.
    Train {
        #[arg(long, value_enum, default_value = "contagion")]
        task: Task,
    },
    /// Evaluate a trained model on held-out data.
    Eval {
        #[arg(long)]
        model: PathBuf,
    },
    /// Model and oracle metrics across observed-unit counts.
    SweepUnits {
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Train and compare summary variants and kernel lengths.
    Ablate,
    /// Correlation of each layer's summary with the latent intensity.
    Probe {
        #[arg(long)]
        model: PathBuf,
    },
    /// Backtest model, oracle and equal-weight books on the synthetic market.
    Backtest {
        /// Trained portfolio model; trains one when omitted.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Bundle verified outputs of earlier runs.
    Report {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Simulate { .. } => "simulate",
            Command::Kalman => "kalman",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::SweepUnits { .. } => "sweep-units",
            Command::Ablate => "ablate",
            Command::Probe { .. } => "probe",
            Command::Backtest { .. } => "backtest",
            Command::Report { .. } => "report",
        }
    }
}

fn parse_variant(s: &str) -> Result<SummaryVariant, String> {
    s.parse().map_err(|e: setseq_core::Error| e.to_string())
}

fn parse_kalman(s: &str) -> Result<KalmanVariant, String> {
    s.parse().map_err(|e: setseq_core::Error| e.to_string())
}

fn run(cli: Cli) -> CliResult<()> {
    let cfg = RunConfig::load(cli.config.as_deref())?.with_overrides(cli.seed, cli.variant, cli.kalman_variant)?;
    let out = cli.out.clone().unwrap_or_else(|| cli.data_dir.join(cli.command.name()));
    let ctx = Ctx {
        cfg,
        out,
        units: cli.units,
        deterministic: cli.deterministic,
    };
    match &cli.command {
        Command::Simulate {
            episodes,
            format,
            held_out,
        } => commands::simulate_cmd(&ctx, *episodes, *format, *held_out),
        Command::Kalman => commands::kalman_cmd(&ctx),
        Command::Train { task } => commands::train_cmd(&ctx, *task),
        Command::Eval { model } => commands::eval_cmd(&ctx, model),
        Command::SweepUnits { model } => commands::sweep_cmd(&ctx, model.as_deref()),
        Command::Ablate => commands::ablate_cmd(&ctx),
        Command::Probe { model } => commands::probe_cmd(&ctx, model),
        Command::Backtest { model } => commands::backtest_cmd(&ctx, model.as_deref()),
        Command::Report { inputs } => commands::report_cmd(&ctx, inputs),
    }?;
    println!("{}", ctx.out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
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
