//! Experiment runner CLI. Subcommands mirror the pipeline names; each takes
//! a JSON config, an output directory, and optional determinism/seed flags.

use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use uaplab_core::runner::{run_experiment, ExperimentConfig};

#[derive(Parser)]
#[command(
    name = "uaplab",
    about = "Targeted standard and universal perturbation experiments against a small built-in CNN",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// JSON experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Output directory for artifacts.
    #[arg(long)]
    out: PathBuf,
    /// Force single-worker, fixed-order execution (the default; recorded in
    /// the run manifest).
    #[arg(long)]
    deterministic: bool,
    /// Replace every seed in the config with this value.
    #[arg(long)]
    seed_override: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a classifier with SGD.
    Train(RunArgs),
    /// Train with inner untargeted PGD on every minibatch.
    AdvTrain(RunArgs),
    /// Per-image targeted PGD over test images.
    Attack(RunArgs),
    /// A universal perturbation over a base set.
    Uap(RunArgs),
    /// Random-patch locality analysis of a saved perturbation.
    Locality(RunArgs),
    /// Wrap-around translation grid of perturbation ASR.
    Spatial(RunArgs),
    /// Cross-model transfer rates of standard vs universal perturbations.
    Transfer(RunArgs),
    /// ASR of a scaled perturbation across models.
    ScaleSweep(RunArgs),
    /// Construct a perturbed, relabeled dataset.
    BuildDataset(RunArgs),
    /// Universality interpolation over base-set sizes.
    InterpK(RunArgs),
    /// Fixed-feature linear probes on a constructed dataset.
    Leakage(RunArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Train(_) => "train",
            Command::AdvTrain(_) => "adv-train",
            Command::Attack(_) => "attack",
            Command::Uap(_) => "uap",
            Command::Locality(_) => "locality",
            Command::Spatial(_) => "spatial",
            Command::Transfer(_) => "transfer",
            Command::ScaleSweep(_) => "scale-sweep",
            Command::BuildDataset(_) => "build-dataset",
            Command::InterpK(_) => "interp-k",
            Command::Leakage(_) => "leakage",
        }
    }

    fn args(&self) -> &RunArgs {
        match self {
            Command::Train(a)
            | Command::AdvTrain(a)
            | Command::Attack(a)
            | Command::Uap(a)
            | Command::Locality(a)
            | Command::Spatial(a)
            | Command::Transfer(a)
            | Command::ScaleSweep(a)
            | Command::BuildDataset(a)
            | Command::InterpK(a)
            | Command::Leakage(a) => a,
        }
    }
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let args = cli.command.args();

    let text = fs::read_to_string(&args.config)
        .with_context(|| format!("reading config {}", args.config.display()))?;
    let config = ExperimentConfig::from_json_with_override(&text, args.seed_override)?;
    if config.pipeline_name() != cli.command.name() {
        bail!(
            "config pipeline \"{}\" does not match subcommand \"{}\"",
            config.pipeline_name(),
            cli.command.name()
        );
    }
    let echo = serde_json::from_str(&text)?;
    let summary = run_experiment(&config, echo, &args.out, args.deterministic)?;
    for path in &summary.outputs {
        log::info!("wrote {}", path.display());
    }
    println!("{}", summary.out_dir.display());
    Ok(())
}
