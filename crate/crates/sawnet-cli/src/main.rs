use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sawnet_cli::commands::{
    cmd_ablate, cmd_eval, cmd_robustness, cmd_train, cmd_verify, DEFAULT_ROBUSTNESS_COUNTS,
};
use sawnet_cli::config::RunConfig;
use sawnet_cli::exit_code;
use sawnet_core::{Error, Result};

#[derive(Parser)]
#[command(name = "sawnet", version, about = "Train and probe point cloud networks")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model; writes per-epoch metrics CSV and a final checkpoint.
    Train(RunArgs),
    /// Evaluate the checkpoint in the output directory on the held-out split.
    Eval(RunArgs),
    /// Accuracy versus point count over subsampled held-out clouds.
    Robustness(PointsArgs),
    /// Train every trunk variant and embedding baseline under one budget.
    Ablate(RunArgs),
    /// Run the invariant suite and report each check.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides the config's `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct PointsArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Comma-separated point counts (default 1024,512,384,256,128).
    #[arg(long, value_delimiter = ',')]
    points: Option<Vec<usize>>,
}

fn load(args: &RunArgs) -> Result<(RunConfig, PathBuf)> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let out = args
        .out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .ok_or_else(|| {
            Error::Config("no output directory: set out_dir in the config or pass --out".into())
        })?;
    Ok((cfg, out))
}

#[derive(Args)]
struct VerifyArgs {
    /// Seed for the randomized checks.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Train(args) => {
            let (cfg, out) = load(&args)?;
            cmd_train(&cfg, &out)?;
        }
        Cmd::Eval(args) => {
            let (cfg, out) = load(&args)?;
            cmd_eval(&cfg, &out)?;
        }
        Cmd::Robustness(args) => {
            let (cfg, out) = load(&args.run)?;
            let counts = args
                .points
                .unwrap_or_else(|| DEFAULT_ROBUSTNESS_COUNTS.to_vec());
            cmd_robustness(&cfg, &out, &counts)?;
        }
        Cmd::Ablate(args) => {
            let (cfg, out) = load(&args)?;
            cmd_ablate(&cfg, &out)?;
        }
        Cmd::Verify(args) => {
            cmd_verify(args.seed)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
