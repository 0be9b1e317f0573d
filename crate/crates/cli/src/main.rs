//! `octprog`: synthetic data generation, preprocessing, training,
//! prediction, and evaluation for OCT progression classification.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use octprog::cli as commands;
use octprog::config::{load_run_config, RunConfig};

#[derive(Parser)]
#[command(
    name = "octprog",
    about = "OCT progression pipeline: pair change classification and future-scan prediction",
    long_about = None,
    version
)]
struct Cli {
    /// JSON run config; omit for the desk_scale preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a labeled synthetic dataset (images + manifest.csv).
    GenSynth {
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        /// Number of scan pairs.
        #[arg(long)]
        n: usize,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Flatten, crop, and resize every pair of a manifest.
    Preprocess {
        /// Input manifest CSV.
        #[arg(long = "in")]
        input: PathBuf,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Train the model selected by the config's `train.task`.
    Train {
        /// Training manifest CSV.
        #[arg(long)]
        manifest: PathBuf,
        /// Output directory for checkpoints and logs.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Write per-case predictions for a manifest.
    Predict {
        /// 1 = pair classification, 2 = single-scan progression.
        #[arg(long)]
        task: u8,
        #[arg(long)]
        manifest: PathBuf,
        /// Directory holding the checkpoints.
        #[arg(long)]
        checkpoints: PathBuf,
        /// Output predictions CSV.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a predictions CSV against manifest labels.
    Evaluate {
        #[arg(long)]
        task: u8,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Report JSON path; prints to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every differentiable primitive.
    Gradcheck,
}

/// `PPMAE_THREADS` caps worker parallelism. Execution is single-threaded,
/// so any positive cap is honored; the variable is still validated.
fn check_thread_cap() -> Result<()> {
    if let Ok(v) = std::env::var("PPMAE_THREADS") {
        let n: usize = v
            .parse()
            .with_context(|| format!("PPMAE_THREADS=`{v}` is not a positive integer"))?;
        if n == 0 {
            bail!("PPMAE_THREADS must be >= 1");
        }
    }
    Ok(())
}

fn load_config(path: Option<&PathBuf>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = load_run_config(path.map(|p| p.as_path()))?;
    if let Some(s) = seed {
        cfg.seed = s;
        cfg.train.seed = s;
        cfg.synth.seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    check_thread_cap()?;
    match cli.command {
        Command::GenSynth { out, n, force } => {
            let cfg = load_config(cli.config.as_ref(), cli.seed)?;
            let manifest = commands::cmd_gen_synth(&cfg, &out, n, force)?;
            println!("wrote {n} pairs; manifest at {}", manifest.display());
        }
        Command::Preprocess { input, out, force } => {
            let cfg = load_config(cli.config.as_ref(), cli.seed)?;
            let manifest = commands::cmd_preprocess(&cfg, &input, &out, force)?;
            println!("preprocessed dataset; manifest at {}", manifest.display());
        }
        Command::Train { manifest, out, force } => {
            let cfg = load_config(cli.config.as_ref(), cli.seed)?;
            let written = commands::cmd_train(&cfg, &manifest, &out, force)?;
            for path in written {
                println!("checkpoint {}", path.display());
            }
        }
        Command::Predict { task, manifest, checkpoints, out } => {
            let cfg = load_config(cli.config.as_ref(), cli.seed)?;
            commands::cmd_predict(&cfg, task, &manifest, &checkpoints, &out)?;
            println!("predictions at {}", out.display());
        }
        Command::Evaluate { task, pred, manifest, out } => {
            let report = commands::cmd_evaluate(&pred, &manifest, task)?;
            match out {
                Some(path) => {
                    std::fs::write(&path, &report)
                        .with_context(|| format!("writing {}", path.display()))?;
                    println!("report at {}", path.display());
                }
                None => print!("{report}"),
            }
        }
        Command::Gradcheck => {
            let cfg = load_config(cli.config.as_ref(), cli.seed)?;
            let (table, ok) = commands::cmd_gradcheck(cfg.seed);
            print!("{table}");
            if !ok {
                bail!("gradient check failed");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
