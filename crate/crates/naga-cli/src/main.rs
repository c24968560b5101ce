//! `naga`: train and benchmark small state-space forecasters on CSV
//! time series, with a built-in correctness battery.
//!
//! Exit codes: 0 on success, 2 for configuration problems (bad flags,
//! bad config file), 1 for runtime failures (missing data, training
//! errors, failed verification checks).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use naga_cli::commands::{self, CliError, SynthArgs, SynthKind};
use naga_cli::config;

#[derive(Parser)]
#[command(
    name = "naga",
    about = "Train and benchmark Naga forecasting models",
    long_about = "Train and benchmark Naga forecasting models.\n\n\
        Config files use one `key = value` per line with `#` comments; see the\n\
        repository README for the full key list. The NAGA_THREADS environment\n\
        variable caps the worker pool used for repeats and ablation variants."
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one configuration, aggregating over its repeats.
    Train {
        /// Experiment config file.
        #[arg(long)]
        config: PathBuf,
        /// Override the config's base seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the single-change ablation grid against a baseline.
    Ablate {
        /// Experiment config file.
        #[arg(long)]
        config: PathBuf,
        /// Output directory for the reports.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the correctness battery (gradients, closed forms, recovery).
    Verify {
        /// Emit the summary as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Generate a synthetic benchmark series as CSV.
    Synth {
        /// Which generator to use.
        #[arg(long, value_enum)]
        kind: SynthKind,
        /// Destination CSV path.
        #[arg(long)]
        out: PathBuf,
        /// Series length.
        #[arg(long, default_value_t = 512)]
        rows: usize,
        /// Window length the bilinear target spans.
        #[arg(long, default_value_t = 8)]
        window: usize,
        /// Input columns (the target column is added on top).
        #[arg(long, default_value_t = 3)]
        features: usize,
        /// Coupling rank (bilinear only).
        #[arg(long, default_value_t = 1)]
        rank: usize,
        /// Observation noise standard deviation.
        #[arg(long, default_value_t = 0.01)]
        noise: f64,
        /// Generator seed.
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

fn run(cmd: Cmd) -> Result<(), CliError> {
    match cmd {
        Cmd::Train { config, seed, out } => {
            let mut cfg = config::load_config(&config).map_err(CliError::Config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let out = out.unwrap_or_else(|| cfg.out.clone());
            commands::cmd_train(&cfg, &out)
        }
        Cmd::Ablate { config, out } => {
            let cfg = config::load_config(&config).map_err(CliError::Config)?;
            commands::cmd_ablate(&cfg, &out)
        }
        Cmd::Verify { json } => commands::cmd_verify(json),
        Cmd::Synth {
            kind,
            out,
            rows,
            window,
            features,
            rank,
            noise,
            seed,
        } => {
            if rows == 0 || window == 0 || features == 0 || rank == 0 {
                return Err(CliError::Config(anyhow::anyhow!(
                    "rows, window, features and rank must be at least 1"
                )));
            }
            let args = SynthArgs {
                kind,
                rows,
                window,
                features,
                rank,
                noise,
                seed,
            };
            commands::cmd_synth(&args, &out)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
