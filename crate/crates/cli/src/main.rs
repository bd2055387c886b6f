//! `conducive`: synthesize data, fit surrogates, run federated samplers and
//! diagnose their traces.
//!
//! Exit codes: 0 ok, 2 configuration or usage error, 3 data error, 4 numeric
//! failure.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use conducive::{BlobsParams, CoinParams, LinRegParams};

use crate::config::{Loaded, SynthSpec};
use crate::error::CliResult;

#[derive(Parser)]
#[command(name = "conducive", version, about = "Federated SG-MCMC experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, env = "CONDUCIVE_OUT")]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Blobs2d,
    BernoulliCoins,
    LinregSynthetic,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic data set as shard CSVs plus a manifest.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Use a preset with default parameters instead of the config's `synth` section.
        #[arg(long, value_enum)]
        preset: Option<Preset>,
    },
    /// Fit per-shard surrogates and their product.
    FitSurrogates {
        #[command(flatten)]
        common: Common,
    },
    /// Run the sampler and write the trace with its metadata.
    Run {
        #[command(flatten)]
        common: Common,
        /// Also write the compact binary trace.
        #[arg(long)]
        binary: bool,
    },
    /// Compute MSE, log-likelihood, score constants and estimator moments.
    Diagnose {
        #[command(flatten)]
        common: Common,
        /// Diagnose traces whose config hash differs from the configuration.
        #[arg(long)]
        force: bool,
        /// Trace files (CSV, or `.bin` with a `.meta.json` sidecar).
        traces: Vec<PathBuf>,
    },
}

fn load(common: &Common) -> CliResult<Loaded> {
    match &common.config {
        Some(path) => Loaded::from_file(path),
        None => Ok(Loaded::empty()),
    }
}

fn dispatch(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Synth { common, preset } => {
            let loaded = load(&common)?;
            let preset = preset.map(|p| match p {
                Preset::Blobs2d => SynthSpec::Blobs2d(BlobsParams::default()),
                Preset::BernoulliCoins => SynthSpec::BernoulliCoins(CoinParams::default()),
                Preset::LinregSynthetic => SynthSpec::LinregSynthetic(LinRegParams::default()),
            });
            let out = loaded.output_dir(common.out);
            commands::synth(&loaded, preset, &out, loaded.seed(common.seed))
        }
        Command::FitSurrogates { common } => {
            let loaded = load(&common)?;
            let out = loaded.output_dir(common.out);
            commands::fit_surrogates(&loaded, &out, loaded.seed(common.seed))
        }
        Command::Run { common, binary } => {
            let loaded = load(&common)?;
            let out = loaded.output_dir(common.out);
            commands::run(&loaded, &out, loaded.seed(common.seed), binary)
        }
        Command::Diagnose { common, force, traces } => {
            let loaded = load(&common)?;
            let out = loaded.output_dir(common.out);
            commands::diagnose(&loaded, &traces, &out, loaded.seed(common.seed), force)
        }
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
