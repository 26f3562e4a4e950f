mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use eoslab::decoding::Strategy;
use eoslab::training::StageKind;
use eoslab::Error;

use commands::{EvalArgs, TrainArgs};
use config::{ExperimentConfig, Split};

/// Toy captioning lab: train a GRU captioner on short captions, then
/// lower its EOS probability and watch captions grow.
#[derive(Parser)]
#[command(name = "eoslab", version)]
struct Cli {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the train/val/probe scene files.
    GenData,
    /// Run one training stage.
    Train {
        #[arg(long, value_parser = parse_stage)]
        stage: StageKind,
        /// Continue from the latest checkpoint of this stage.
        #[arg(long)]
        resume: bool,
        /// Update only the bridge.
        #[arg(long)]
        bridge_only: bool,
        /// One run per learning rate, e.g. `lr=5e-3,1e-3,5e-4`.
        #[arg(long)]
        sweep: Option<String>,
    },
    /// Evaluate checkpoints and emit a JSON report.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "val", value_parser = parse_split)]
        split: Split,
        /// Block EOS so decoding runs to the length cap.
        #[arg(long)]
        trivial: bool,
        #[arg(long, value_parser = parse_strategy)]
        decoding: Option<Strategy>,
        /// Write the report here and print a summary instead.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Caption one scene with each checkpoint in turn.
    ProbeCaptions {
        #[arg(long = "checkpoint")]
        checkpoints: Vec<PathBuf>,
        #[arg(long, default_value_t = 0)]
        scene_seed: u64,
    },
    /// Learning-rate sweep: `eoslab sweep --stage debias lr=0.05,0.1,0.2`.
    Sweep {
        #[arg(long, value_parser = parse_stage, default_value = "debias")]
        stage: StageKind,
        spec: String,
        #[arg(long)]
        bridge_only: bool,
    },
}

fn parse_stage(s: &str) -> Result<StageKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_split(s: &str) -> Result<Split, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn run(cli: Cli) -> eoslab::Result<()> {
    let cfg = ExperimentConfig::load(cli.config.as_deref())?;
    let mut out = std::io::stdout().lock();
    match cli.command {
        Command::GenData => commands::gen_data(&cfg, &mut out),
        Command::Train {
            stage,
            resume,
            bridge_only,
            sweep,
        } => {
            let sweep = sweep.as_deref().map(commands::parse_sweep).transpose()?;
            let args = TrainArgs {
                stage,
                resume,
                bridge_only,
                sweep,
            };
            commands::train(&cfg, &args, &mut out)
        }
        Command::Eval {
            checkpoint,
            split,
            trivial,
            decoding,
            output,
        } => {
            let args = EvalArgs {
                checkpoint,
                split,
                trivial,
                decoding,
                output,
            };
            commands::eval(&cfg, &args, &mut out)
        }
        Command::ProbeCaptions { checkpoints, scene_seed } => {
            commands::probe_captions(&cfg, &checkpoints, scene_seed, &mut out)
        }
        Command::Sweep {
            stage,
            spec,
            bridge_only,
        } => {
            let args = TrainArgs {
                stage,
                resume: false,
                bridge_only,
                sweep: Some(commands::parse_sweep(&spec)?),
            };
            commands::train(&cfg, &args, &mut out)
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Precondition(_) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
