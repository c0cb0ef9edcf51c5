use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use auxgan::cli::{cmd_eval, cmd_generate, cmd_gradcheck, cmd_summary, cmd_train, RunConfig};

#[derive(Parser)]
#[command(
    name = "auxgan",
    about = "Train and evaluate residual GAN generators with an auxiliary gated-fusion branch"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model from a preset or config file.
    Train {
        /// Path to a run-config TOML file.
        #[arg(long, conflicts_with = "preset")]
        config: Option<PathBuf>,
        /// Built-in preset: cifar-gan, cifar-cgan, lsun-ttur, hq-256,
        /// hq-512, desk-smoke.
        #[arg(long)]
        preset: Option<String>,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for checkpoints, metrics, and samples.
        #[arg(long)]
        out: PathBuf,
        /// Swap which normalized feature the auxiliary gating unit refines.
        #[arg(long)]
        swap_gffm_args: bool,
        /// 1 = fully serial deterministic mode.
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Compute FID (and IS when available) for a checkpointed generator.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Override the backend: pixel-stat, random-proj, external:<path>.
        #[arg(long)]
        backend: Option<String>,
        /// Override the real dataset source.
        #[arg(long)]
        data: Option<String>,
        /// Number of samples to draw and embed.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for the appended evals.csv (defaults beside the checkpoint).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample an image grid from a checkpointed generator.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Grid columns.
        #[arg(long, default_value_t = 4)]
        grid: usize,
        /// Output PNG path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient checks; exits non-zero on failure.
    Gradcheck {
        /// Scope: gffm, blocks, generator, or all.
        #[arg(default_value = "all")]
        scope: String,
    },
    /// Print the architecture summary and parameter-budget comparison.
    Summary {
        #[arg(long, conflicts_with = "preset")]
        config: Option<PathBuf>,
        #[arg(long)]
        preset: Option<String>,
    },
}

fn resolve_config(config: Option<&PathBuf>, preset: Option<&str>) -> auxgan::Result<RunConfig> {
    match (config, preset) {
        (Some(path), _) => RunConfig::load(path),
        (None, Some(name)) => RunConfig::preset(name),
        (None, None) => Err(auxgan::Error::InvalidConfig(
            "provide --config <file> or --preset <name>".into(),
        )),
    }
}

fn run() -> auxgan::Result<bool> {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Train {
            config,
            preset,
            seed,
            out,
            swap_gffm_args,
            threads,
        } => {
            let mut cfg = resolve_config(config.as_ref(), preset.as_deref())?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            if swap_gffm_args {
                cfg.arch.swap_gffm_args = true;
            }
            if let Some(t) = threads {
                cfg.train.threads = t;
            }
            cmd_train(&cfg, &out)?;
            Ok(true)
        }
        Cmd::Eval {
            checkpoint,
            backend,
            data,
            n,
            seed,
            out,
        } => {
            cmd_eval(
                &checkpoint,
                backend.as_deref(),
                data.as_deref(),
                n,
                seed,
                out.as_deref(),
            )?;
            Ok(true)
        }
        Cmd::Generate {
            checkpoint,
            n,
            seed,
            grid,
            out,
        } => {
            cmd_generate(&checkpoint, n, seed, grid, &out)?;
            Ok(true)
        }
        Cmd::Gradcheck { scope } => cmd_gradcheck(&scope),
        Cmd::Summary { config, preset } => {
            let cfg = resolve_config(config.as_ref(), preset.as_deref())?;
            cmd_summary(&cfg)?;
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
