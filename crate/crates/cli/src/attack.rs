use std::path::PathBuf;

use clap::Args;
use serde::{Deserialize, Serialize};
use varm::attacks::{
    attack_campaign, lambda_grid, lambda_subset, sample_pairs, AttackMode, CampaignConfig, DEFAULT_PAIRS,
};

use crate::common::{create_dir, load_model, model_id, resolved, write_json, DataSpec, CONFIG_FILE};
use crate::fail::{Failure, Outcome};

#[derive(Debug, Args)]
pub struct AttackArgs {
    /// Checkpoint directory written by `train`.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// latent, output, latent-top or latent-bottom.
    #[arg(long, default_value = "latent")]
    pub mode: String,
    /// Number of input/target pairs.
    #[arg(long, default_value_t = DEFAULT_PAIRS)]
    pub pairs: usize,
    /// Number of penalty weights taken evenly from the 50-value grid.
    #[arg(long, default_value_t = 50)]
    pub lambdas: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Seed for pair sampling (and stochastic encodings).
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1000)]
    pub max_iters: usize,
    /// Attack sampled encodings instead of posterior means.
    #[arg(long)]
    pub stochastic: bool,
    /// Stop after computing this many new cells; rerun to resume.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct AttackRun {
    ckpt: String,
    mode: AttackMode,
    pairs: usize,
    lambda_indices: Vec<usize>,
    seed: u64,
    max_iters: usize,
    stochastic: bool,
    data: DataSpec,
}

pub fn run(args: &AttackArgs) -> Outcome {
    let mode: AttackMode = args.mode.parse()?;
    if args.pairs == 0 {
        return Err(Failure::config("--pairs must be at least 1"));
    }
    if args.max_iters == 0 {
        return Err(Failure::config("--max-iters must be at least 1"));
    }
    let lambda_indices = lambda_subset(args.lambdas).map_err(|e| Failure::config(format!("--lambdas: {e}")))?;
    let (model, meta) = load_model(&args.ckpt)?;
    let data = DataSpec::from_meta(&meta);
    let run = AttackRun {
        ckpt: resolved(&args.ckpt),
        mode,
        pairs: args.pairs,
        lambda_indices: lambda_indices.clone(),
        seed: args.seed,
        max_iters: args.max_iters,
        stochastic: args.stochastic,
        data,
    };
    create_dir(&args.out)?;
    write_json(&args.out.join(CONFIG_FILE), &run)?;

    let dataset = data.generate()?;
    let grid = lambda_grid();
    let cfg = CampaignConfig {
        model_id: model_id(&args.ckpt),
        checkpoint: Some(run.ckpt.clone()),
        mode,
        seed: args.seed,
        pairs: sample_pairs(dataset.len(), args.pairs, args.seed).map_err(|e| Failure::config(e.to_string()))?,
        lambdas: lambda_indices.iter().map(|&i| grid[i]).collect(),
        max_iters: args.max_iters,
        tol: 1e-9,
        stochastic: args.stochastic,
        data: Some(serde_json::to_value(data)?),
    };
    let report = attack_campaign(&model, &dataset.pixels, &cfg, &args.out, args.limit)?;
    eprintln!(
        "{} of {} cells done ({} this run, {} failed)",
        report.skipped + report.ran,
        report.total_cells,
        report.ran,
        report.failed
    );
    if report.complete && report.failed == report.total_cells {
        return Err(Failure::numeric("every attack failed"));
    }
    Ok(())
}
