//! `bsdn`: corrupt, train, denoise, evaluate and verify blind-spot denoisers.
//!
//! Exit codes: 0 success, 1 failure (verification, divergence, I/O), 2 usage error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Failed(String),
    #[error(transparent)]
    Core(#[from] bsdn_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        use bsdn_core::Error as E;
        match self {
            CliError::Usage(_) | CliError::Core(E::Usage(_) | E::Config(_)) => 2,
            _ => 1,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "bsdn", version, about = "Self-supervised blind-spot image denoising")]
struct Cli {
    /// Worker threads for parallel evaluation (0 = all cores)
    #[arg(long, global = true, env = "BSDN_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct NoiseArgs {
    /// gaussian, poisson or impulse
    #[arg(long)]
    pub noise: Option<String>,
    /// Fixed parameter: sigma in 8-bit units, lambda, or alpha
    #[arg(long, conflicts_with = "param_range")]
    pub param: Option<f64>,
    /// Per-image uniform range LOW:HIGH
    #[arg(long)]
    pub param_range: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write corrupted copies of clean images plus a manifest
    Corrupt {
        #[command(flatten)]
        noise: NoiseArgs,
        /// Clean PNG file or directory
        #[arg(long = "in")]
        input: PathBuf,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
        #[arg(long, env = "BSDN_SEED", default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        replicates: usize,
        /// float (unclamped container) or png (clamped, 8-bit)
        #[arg(long, default_value = "float")]
        format: String,
    },
    /// Train a denoiser
    Train {
        /// ours, ours-diag, ours-mu, n2c, n2n, mask-copy or mask-random
        #[arg(long)]
        method: Option<String>,
        #[command(flatten)]
        noise: NoiseArgs,
        /// known or unknown
        #[arg(long)]
        knownness: Option<String>,
        /// Directory of clean training PNGs
        #[arg(long, required_unless_present = "synthetic")]
        data: Option<PathBuf>,
        /// Train on this many generated 128x128 color images instead of --data
        #[arg(long, conflicts_with = "data")]
        synthetic: Option<usize>,
        /// Directory of clean validation PNGs
        #[arg(long)]
        val: Option<PathBuf>,
        /// Run configuration file (`key = value` lines)
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override a configuration key, e.g. --set crop=32 (repeatable)
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, env = "BSDN_SEED")]
        seed: Option<u64>,
        /// Checkpoint to write
        #[arg(long)]
        out: PathBuf,
        /// Progress log (defaults to <out>.log.tsv)
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Denoise an image or a directory of images
    Denoise {
        #[arg(long)]
        ckpt: PathBuf,
        /// PNG or float container, or a directory of them
        #[arg(long = "in")]
        input: PathBuf,
        /// Output PNG (single input) or directory
        #[arg(long)]
        out: PathBuf,
        /// prior or posterior (default: posterior when the checkpoint has a prior head)
        #[arg(long)]
        mode: Option<String>,
        /// Known noise parameter; illegal for checkpoints that learned it
        #[arg(long)]
        param: Option<f64>,
        /// final, best or ema
        #[arg(long, default_value = "final")]
        weights: String,
    },
    /// Compare checkpoints on identical corrupted inputs
    Eval {
        /// Checkpoint (repeatable)
        #[arg(long = "ckpt", required = true)]
        ckpts: Vec<PathBuf>,
        /// Directory of clean PNGs
        #[arg(long)]
        clean: PathBuf,
        #[command(flatten)]
        noise: NoiseArgs,
        #[arg(long, default_value_t = 1)]
        replicates: usize,
        #[arg(long, env = "BSDN_SEED", default_value_t = 0)]
        seed: u64,
        /// CSV report path
        #[arg(long)]
        report: PathBuf,
        /// final, best or ema
        #[arg(long, default_value = "final")]
        weights: String,
    },
    /// Check that outputs never depend on the pixel at the same location
    VerifyBlindspot {
        #[arg(long, conflicts_with = "random_config")]
        ckpt: Option<PathBuf>,
        /// Use freshly initialized networks
        #[arg(long)]
        random_config: bool,
        /// Probe a network without a blind spot (the probe must find leaks)
        #[arg(long, requires = "random_config")]
        baseline: bool,
        #[arg(long, default_value_t = 3)]
        depth: usize,
        #[arg(long, default_value_t = 8)]
        enc_width: usize,
        #[arg(long, default_value_t = 16)]
        dec_width: usize,
        #[arg(long, default_value_t = 3)]
        channels: usize,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        /// Input side length
        #[arg(long, default_value_t = 32)]
        size: usize,
        /// Trials between weight redraws for --random-config
        #[arg(long, default_value_t = 100)]
        trials_per_weights: usize,
        #[arg(long, env = "BSDN_SEED", default_value_t = 0)]
        seed: u64,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot configure {n} threads: {e}")))?;
    }
    match cli.command {
        Command::Corrupt {
            noise,
            input,
            out,
            seed,
            replicates,
            format,
        } => commands::corrupt(&noise, &input, &out, seed, replicates, &format),
        Command::Train {
            method,
            noise,
            knownness,
            data,
            synthetic,
            val,
            config,
            overrides,
            steps,
            seed,
            out,
            log,
        } => commands::train(commands::TrainArgs {
            method,
            noise,
            knownness,
            data,
            synthetic,
            val,
            config,
            overrides,
            steps,
            seed,
            out,
            log,
        }),
        Command::Denoise {
            ckpt,
            input,
            out,
            mode,
            param,
            weights,
        } => commands::denoise(&ckpt, &input, &out, mode.as_deref(), param, &weights),
        Command::Eval {
            ckpts,
            clean,
            noise,
            replicates,
            seed,
            report,
            weights,
        } => commands::eval(&ckpts, &clean, &noise, replicates, seed, &report, &weights),
        Command::VerifyBlindspot {
            ckpt,
            random_config,
            baseline,
            depth,
            enc_width,
            dec_width,
            channels,
            trials,
            size,
            trials_per_weights,
            seed,
        } => commands::verify_blindspot(commands::VerifyArgs {
            ckpt,
            random_config,
            baseline,
            depth,
            enc_width,
            dec_width,
            channels,
            trials,
            size,
            trials_per_weights,
            seed,
        }),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
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
            ExitCode::from(e.exit_code())
        }
    }
}
