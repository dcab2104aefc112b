//! Thin CLI over the pipeline stages. All logic lives in the library;
//! this binary parses arguments, loads the config, and maps errors to
//! exit codes: 0 success, 2 configuration error, 3 runtime failure.

use clap::{Args, Parser, Subcommand};
use flowpref::error::{Error, Result};
use flowpref::harness::studies::{cmd_ablate, Study};
use flowpref::harness::{stages, RunConfig, RunManifest};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "flowpref",
    version,
    about = "Preference-optimization lab for rectified-flow models on synthetic micro-videos"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct StageArgs {
    /// JSON run config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory; stages read their inputs from and write their
    /// outputs to this directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CkptArgs {
    #[command(flatten)]
    stage: StageArgs,
    /// Checkpoint to evaluate; defaults to dpo.ckpt, then sft.ckpt.
    #[arg(long)]
    ckpt: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    stage: StageArgs,
    /// flip | quantity | segment_length | majority_vote | new_gt
    #[arg(long)]
    study: String,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render the ground-truth dataset.
    GenData(StageArgs),
    /// Fit the velocity model on the training split.
    TrainSft(StageArgs),
    /// Sample preference pairs from a checkpoint.
    GenPairs(StageArgs),
    /// Label pairs with an oracle or an imported label file.
    Annotate(StageArgs),
    /// Preference-optimize against the frozen SFT reference.
    TrainDpo(StageArgs),
    /// Sample the holdout split and write metrics.
    Eval(CkptArgs),
    /// Run one ablation study end to end.
    Ablate(AblateArgs),
    /// Sweep corruption severities and report loss-difference means.
    ProbeDominance(CkptArgs),
}

fn load_config(args: &StageArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    std::fs::create_dir_all(&args.out)?;
    Ok(cfg)
}

fn report(manifest: &RunManifest) {
    for a in &manifest.artifacts {
        println!("{}: {} ({})", manifest.command, a.path, &a.sha256[..12]);
    }
    println!("{}: done in {:.1}s", manifest.command, manifest.wall_secs);
}

fn run(cli: Cli) -> Result<()> {
    let manifest = match &cli.cmd {
        Cmd::GenData(a) => stages::cmd_gen_data(&load_config(a)?, &a.out)?,
        Cmd::TrainSft(a) => stages::cmd_train_sft(&load_config(a)?, &a.out)?,
        Cmd::GenPairs(a) => stages::cmd_gen_pairs(&load_config(a)?, &a.out)?,
        Cmd::Annotate(a) => stages::cmd_annotate(&load_config(a)?, &a.out)?,
        Cmd::TrainDpo(a) => stages::cmd_train_dpo(&load_config(a)?, &a.out)?,
        Cmd::Eval(a) => stages::cmd_eval(&load_config(&a.stage)?, &a.stage.out, a.ckpt.as_deref())?,
        Cmd::Ablate(a) => {
            let study = Study::parse(&a.study)?;
            cmd_ablate(&load_config(&a.stage)?, &a.stage.out, study)?
        }
        Cmd::ProbeDominance(a) => stages::cmd_probe_dominance(
            &load_config(&a.stage)?,
            &a.stage.out,
            a.ckpt.as_deref(),
        )?,
    };
    report(&manifest);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) => 2u8,
                _ => 3u8,
            })
        }
    }
}
