use std::path::PathBuf;

use clap::{Args, ValueEnum};
use ndarray::s;
use serde::Serialize;
use varm::evaluation::{denoise_density, elbo_unpenalized, weight_l2_report, DenoiseReport, DEFAULT_NOISE_SCALES};

use crate::common::{create_dir, load_model, model_id, resolved, write_json, DataSpec, CONFIG_FILE};
use crate::fail::{Failure, Outcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    Denoise,
    Elbo,
    Weights,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint directory; repeat to evaluate several models.
    #[arg(long, required = true)]
    pub ckpt: Vec<PathBuf>,
    #[arg(long, value_enum)]
    pub suite: Suite,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Noise standard deviations for the denoise suite.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_NOISE_SCALES)]
    pub scales: Vec<f64>,
    /// Leading dataset rows evaluated.
    #[arg(long, default_value_t = 1000)]
    pub points: usize,
    #[arg(long, default_value_t = 40)]
    pub bins: usize,
}

#[derive(Debug, Serialize)]
struct EvalRun {
    suite: Suite,
    ckpts: Vec<String>,
    seed: u64,
    scales: Vec<f64>,
    points: usize,
    bins: usize,
    data: DataSpec,
}

#[derive(Serialize)]
struct DenoiseEntry {
    model_id: String,
    beta: f64,
    #[serde(rename = "L")]
    layers: usize,
    report: DenoiseReport,
}

pub fn run(args: &EvalArgs) -> Outcome {
    if args.suite == Suite::Weights && args.ckpt.len() < 2 {
        return Err(Failure::config("the weights suite compares checkpoints: pass --ckpt at least twice"));
    }
    if args.points == 0 {
        return Err(Failure::config("--points must be positive"));
    }
    let mut models = Vec::with_capacity(args.ckpt.len());
    for dir in &args.ckpt {
        let (m, meta) = load_model(dir)?;
        models.push((model_id(dir), m, meta));
    }
    let data = DataSpec::from_meta(&models[0].2);
    let run = EvalRun {
        suite: args.suite,
        ckpts: args.ckpt.iter().map(|p| resolved(p)).collect(),
        seed: args.seed,
        scales: args.scales.clone(),
        points: args.points,
        bins: args.bins,
        data,
    };
    create_dir(&args.out)?;
    write_json(&args.out.join(CONFIG_FILE), &run)?;
    let dataset = data.generate()?;
    let rows = args.points.min(dataset.len());
    let x = dataset.pixels.slice(s![..rows, ..]).to_owned();

    match args.suite {
        Suite::Denoise => {
            let mut entries = Vec::with_capacity(models.len());
            let mut w = csv::Writer::from_path(args.out.join("denoise.csv"))?;
            w.write_record(["model_id", "beta", "L", "scale", "mean_loglik"])?;
            for (id, m, _) in &models {
                let report = denoise_density(m, &x, &args.scales, args.seed, args.bins)?;
                for s in &report.scales {
                    w.write_record([
                        id.clone(),
                        m.config.beta.to_string(),
                        m.layers().to_string(),
                        s.scale.to_string(),
                        s.mean.to_string(),
                    ])?;
                }
                entries.push(DenoiseEntry {
                    model_id: id.clone(),
                    beta: m.config.beta,
                    layers: m.layers(),
                    report,
                });
            }
            w.flush()?;
            write_json(&args.out.join("denoise.json"), &entries)?;
        }
        Suite::Elbo => {
            let mut w = csv::Writer::from_path(args.out.join("elbo.csv"))?;
            w.write_record(["model_id", "beta", "L", "elbo"])?;
            for (id, m, _) in &models {
                let elbo = elbo_unpenalized(m, &x, args.seed)?;
                w.write_record([id.clone(), m.config.beta.to_string(), m.layers().to_string(), elbo.to_string()])?;
            }
            w.flush()?;
        }
        Suite::Weights => {
            let mut w = csv::Writer::from_path(args.out.join("weights.csv"))?;
            w.write_record([
                "model_a",
                "model_b",
                "encoder_norm_a",
                "encoder_norm_b",
                "decoder_norm_a",
                "decoder_norm_b",
                "encoder_change_pct",
                "decoder_change_pct",
            ])?;
            let (base_id, base, _) = &models[0];
            for (id, m, _) in &models[1..] {
                let r = weight_l2_report(base, m)?;
                w.write_record([
                    base_id.clone(),
                    id.clone(),
                    r.encoder_norm_a.to_string(),
                    r.encoder_norm_b.to_string(),
                    r.decoder_norm_a.to_string(),
                    r.decoder_norm_b.to_string(),
                    r.encoder_change_pct.to_string(),
                    r.decoder_change_pct.to_string(),
                ])?;
            }
            w.flush()?;
        }
    }
    Ok(())
}
