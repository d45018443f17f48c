use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use spre_core::commands::{project_checkpoint, reparam_checkpoint, spre_build_checkpoint, verify_checkpoints};
use spre_core::io::{metrics_jsonl, write_atomic, write_profiles_csv};
use spre_core::{commands, train, Checkpoint, NMPattern, SpReVariant, TrainConfig};

/// N:M sparse training, spatial re-parameterization and checkpoint tooling.
#[derive(Parser)]
#[command(name = "spre", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a JSON config; writes the configured outputs.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Spatial-sparsity CSV of every mask in a checkpoint.
    Profile {
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// N:M-project every eligible conv weight and store the masks.
    Project {
        checkpoint: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        m: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build SpRe blocks from a pre-trained checkpoint.
    SpreBuild {
        checkpoint: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        m: usize,
        #[arg(long, default_value = "spre")]
        variant: SpReVariant,
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge every SpRe block into a single conv.
    Reparam {
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare a two-branch checkpoint with its merged form.
    Verify {
        two_branch: PathBuf,
        merged: PathBuf,
        #[arg(long, default_value_t = 10)]
        trials: usize,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
}

fn load(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))
}

fn save(ck: &Checkpoint, path: &Path) -> Result<()> {
    ck.save(path).with_context(|| format!("writing {}", path.display()))
}

/// Runs one command; `Ok(false)` means it ran but the check failed.
fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train { config } => {
            let text = std::fs::read_to_string(&config).with_context(|| format!("reading {}", config.display()))?;
            let cfg = TrainConfig::from_json(&text)?;
            let metrics = train(&cfg)?;
            if cfg.metrics_path.is_none() {
                print!("{}", metrics_jsonl(&metrics.epochs)?);
            }
            println!("{}", serde_json::json!({"final_accuracy": metrics.final_accuracy}));
        }
        Command::Profile { checkpoint, out } => {
            let profiles = commands::profile_checkpoint(&load(&checkpoint)?)?;
            let mut buf = Vec::new();
            write_profiles_csv(&mut buf, &profiles)?;
            write_atomic(&out, &buf)?;
        }
        Command::Project { checkpoint, n, m, out } => {
            save(&project_checkpoint(&load(&checkpoint)?, NMPattern::new(n, m)?)?, &out)?;
        }
        Command::SpreBuild {
            checkpoint,
            n,
            m,
            variant,
            out,
        } => {
            if variant == SpReVariant::None {
                bail!("spre-build needs a variant with an extra branch (spre, same or inverse)");
            }
            save(&spre_build_checkpoint(&load(&checkpoint)?, NMPattern::new(n, m)?, variant)?, &out)?;
        }
        Command::Reparam { checkpoint, out } => {
            save(&reparam_checkpoint(&load(&checkpoint)?)?, &out)?;
        }
        Command::Verify {
            two_branch,
            merged,
            trials,
            tol,
        } => {
            let report = verify_checkpoints(&load(&two_branch)?, &load(&merged)?, trials, tol)?;
            println!("{}", serde_json::to_string(&report)?);
            return Ok(report.overall.passed);
        }
    }
    Ok(true)
}

fn report_error(message: String) -> ExitCode {
    eprintln!("{}", serde_json::json!({ "error": message }));
    ExitCode::FAILURE
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => e.exit(),
        Err(e) => return report_error(e.kind().to_string() + ": " + e.to_string().lines().next().unwrap_or("")),
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(err) => report_error(err.chain().map(|e| e.to_string()).collect::<Vec<_>>().join(": ")),
    }
}
