use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::Serialize;
use varm::attacks::{read_distortion, CampaignManifest, CAMPAIGN_CSV, CAMPAIGN_MANIFEST};
use varm::data::IMAGE_SIDE;
use varm::evaluation::{aggregate_campaign, percentile, read_metric_rows, reconstruct_row, write_summary_csv, CellSummary, MetricRow};

use crate::common::{create_dir, load_model, resolved, write_json, DataSpec, CONFIG_FILE};
use crate::fail::{Failure, Outcome};
use crate::png::Gray;

pub const BANDS_CSV: &str = "delta_vs_beta.csv";
pub const BANDS_PNG: &str = "delta_vs_beta.png";
pub const SUMMARY_CSV: &str = "summary.csv";

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Campaign directories written by `attack`.
    #[arg(long, required = true, num_args = 1..)]
    pub campaign: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Positions within each campaign's lambda list to render as image
    /// grids; defaults to the middle one.
    #[arg(long, value_delimiter = ',')]
    pub grid_lambdas: Vec<usize>,
    /// Skip the image grids, which need the attacked checkpoint.
    #[arg(long)]
    pub no_grids: bool,
    /// Accepted for interface symmetry; reports involve no sampling.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Serialize)]
struct ReportRun {
    campaigns: Vec<String>,
    grid_lambdas: Vec<usize>,
    grids: bool,
    seed: u64,
}

struct Campaign {
    dir: PathBuf,
    manifest: CampaignManifest,
    rows: Vec<MetricRow>,
}

fn load_campaign(dir: &Path) -> Outcome<Campaign> {
    let csv = dir.join(CAMPAIGN_CSV);
    let mpath = dir.join(CAMPAIGN_MANIFEST);
    if !csv.is_file() || !mpath.is_file() {
        return Err(Failure::missing(format!("no finished campaign in {}", dir.display())));
    }
    let rows = read_metric_rows(&csv)?;
    if rows.is_empty() {
        return Err(Failure::missing(format!("campaign in {} has no results", dir.display())));
    }
    let manifest: CampaignManifest = serde_json::from_slice(&fs::read(&mpath)?)?;
    Ok(Campaign {
        dir: dir.to_path_buf(),
        manifest,
        rows,
    })
}

fn to_gray(v: f64) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 0.5) * 255.0).round() as u8
}

fn tile(values: &[f64]) -> Gray {
    Gray {
        width: IMAGE_SIDE,
        height: IMAGE_SIDE,
        pixels: values.iter().map(|&v| to_gray(v)).collect(),
    }
}

/// Min-max rescaled to the full 8-bit range.
fn stretched_tile(values: &[f64]) -> Gray {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let pixels = values
        .iter()
        .map(|&v| if hi > lo { ((v - lo) / (hi - lo) * 255.0).round() as u8 } else { 128 })
        .collect();
    Gray {
        width: IMAGE_SIDE,
        height: IMAGE_SIDE,
        pixels,
    }
}

/// Columns: original, adversarial input, distortion, target. Rows: inputs,
/// reconstructions (the distortion column repeats the distortion).
pub fn attack_grid(x: &[f64], d: &[f64], xt: &[f64], recon: [&[f64]; 3]) -> Gray {
    let x_star: Vec<f64> = x.iter().zip(d).map(|(a, b)| (a + b).clamp(-1.0, 1.0)).collect();
    let side = IMAGE_SIDE;
    let mut img = Gray::new(4 * side, 2 * side, 0);
    let top = [tile(x), tile(&x_star), stretched_tile(d), tile(xt)];
    let bottom = [tile(recon[0]), tile(recon[1]), stretched_tile(d), tile(recon[2])];
    for (c, t) in top.iter().enumerate() {
        img.blit(t, c * side, 0);
    }
    for (c, t) in bottom.iter().enumerate() {
        img.blit(t, c * side, side);
    }
    img
}

fn render_grids(c: &Campaign, out: &Path, picks: &[usize]) -> Outcome {
    let ckpt = c
        .manifest
        .config
        .checkpoint
        .as_ref()
        .ok_or_else(|| Failure::missing(format!("campaign in {} records no checkpoint", c.dir.display())))?;
    let (model, meta) = load_model(Path::new(ckpt))?;
    let data: DataSpec = c
        .manifest
        .config
        .data
        .as_ref()
        .and_then(|v| serde_json::from_value(v.clone()).ok())
        .unwrap_or_else(|| DataSpec::from_meta(&meta));
    let dataset = data.generate()?;
    let n_lambdas = c.manifest.config.lambdas.len();
    for &li in picks {
        if li >= n_lambdas {
            return Err(Failure::config(format!("--grid-lambdas {li}: campaign has {n_lambdas} lambdas")));
        }
        for (p, &(a, b)) in c.manifest.config.pairs.iter().enumerate() {
            let d = match read_distortion(&c.dir, p, li) {
                Ok(d) if !d.is_empty() => d,
                _ => continue,
            };
            let x = dataset.row(a);
            let xt = dataset.row(b);
            let x_star: Vec<f64> = x.iter().zip(&d).map(|(u, v)| (u + v).clamp(-1.0, 1.0)).collect();
            let r0 = reconstruct_row(&model, &x)?;
            let r1 = reconstruct_row(&model, &x_star)?;
            let r2 = reconstruct_row(&model, &xt)?;
            attack_grid(&x, &d, &xt, [&r0, &r1, &r2]).save(&out.join(format!("grid_{p}_{li}.png")))?;
        }
    }
    Ok(())
}

const PLOT_W: usize = 480;
const PLOT_H: usize = 320;
const MARGIN: usize = 32;

/// Median lines over beta with 2.5-97.5 percentile bands, one series per
/// layer count. Later series are drawn lighter.
pub fn band_plot(cells: &[CellSummary]) -> Gray {
    let mut img = Gray::new(PLOT_W, PLOT_H, 255);
    let (x0, y0) = (MARGIN as i64, (PLOT_H - MARGIN) as i64);
    let (x1, y1) = ((PLOT_W - MARGIN) as i64, MARGIN as i64);
    img.line((x0, y0), (x1, y0), 0);
    img.line((x0, y0), (x0, y1), 0);
    if cells.is_empty() {
        return img;
    }
    let bmin = cells.iter().map(|c| c.beta).fold(f64::INFINITY, f64::min);
    let bmax = cells.iter().map(|c| c.beta).fold(f64::NEG_INFINITY, f64::max);
    let vmin = cells.iter().map(|c| c.delta_lo).fold(f64::INFINITY, f64::min);
    let vmax = cells.iter().map(|c| c.delta_hi).fold(f64::NEG_INFINITY, f64::max);
    let (bspan, vspan) = ((bmax - bmin).max(1e-12), (vmax - vmin).max(1e-12));
    let px = |b: f64| {
        if bmax > bmin {
            x0 + 8 + ((b - bmin) / bspan * (x1 - x0 - 16) as f64).round() as i64
        } else {
            (x0 + x1) / 2
        }
    };
    let py = |v: f64| y0 - 8 - ((v - vmin) / vspan * (y0 - y1 - 16) as f64).round() as i64;
    let mut layers: Vec<usize> = cells.iter().map(|c| c.layers).collect();
    layers.dedup();
    layers.sort_unstable();
    layers.dedup();
    for (k, &l) in layers.iter().enumerate() {
        let series: Vec<&CellSummary> = cells.iter().filter(|c| c.layers == l).collect();
        let ink = (k * 70).min(140) as u8;
        let band = 170u8.saturating_add((k * 25) as u8).min(225);
        for c in &series {
            img.line((px(c.beta), py(c.delta_lo)), (px(c.beta), py(c.delta_hi)), band);
        }
        for w in series.windows(2) {
            img.line((px(w[0].beta), py(w[0].delta_lo)), (px(w[1].beta), py(w[1].delta_lo)), band);
            img.line((px(w[0].beta), py(w[0].delta_hi)), (px(w[1].beta), py(w[1].delta_hi)), band);
            img.line((px(w[0].beta), py(w[0].delta_median)), (px(w[1].beta), py(w[1].delta_median)), ink);
        }
        for c in &series {
            let (cx, cy) = (px(c.beta), py(c.delta_median));
            for dx in -2..=2 {
                for dy in -2..=2 {
                    if cx + dx >= 0 && cy + dy >= 0 {
                        img.set((cx + dx) as usize, (cy + dy) as usize, ink);
                    }
                }
            }
        }
    }
    img
}

fn write_summary(path: &Path, campaigns: &[Campaign]) -> Outcome {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "model_id",
        "beta",
        "L",
        "z_dims",
        "mode",
        "cells",
        "delta_median",
        "neg_loglik_median",
        "l2_adv_median",
        "l2_clean_median",
    ])?;
    for c in campaigns {
        let first = &c.rows[0];
        let med = |f: fn(&MetricRow) -> f64| percentile(&c.rows.iter().map(f).collect::<Vec<_>>(), 50.0);
        w.write_record([
            first.model_id.clone(),
            first.beta.to_string(),
            first.layers.to_string(),
            first.z_dims.clone(),
            c.manifest.config.mode.to_string(),
            c.rows.len().to_string(),
            med(|r| r.delta).to_string(),
            med(|r| r.neg_loglik).to_string(),
            med(|r| r.l2_adv).to_string(),
            med(|r| r.l2_clean).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn run(args: &ReportArgs) -> Outcome {
    let campaigns = args.campaign.iter().map(|d| load_campaign(d)).collect::<Outcome<Vec<_>>>()?;
    let run = ReportRun {
        campaigns: args.campaign.iter().map(|p| resolved(p)).collect(),
        grid_lambdas: args.grid_lambdas.clone(),
        grids: !args.no_grids,
        seed: args.seed,
    };
    create_dir(&args.out)?;
    write_json(&args.out.join(CONFIG_FILE), &run)?;

    let rows: Vec<MetricRow> = campaigns.iter().flat_map(|c| c.rows.iter().cloned()).collect();
    let cells = aggregate_campaign(&rows);
    write_summary_csv(&args.out.join(BANDS_CSV), &cells)?;
    band_plot(&cells).save(&args.out.join(BANDS_PNG))?;
    write_summary(&args.out.join(SUMMARY_CSV), &campaigns)?;

    if !args.no_grids {
        for (i, c) in campaigns.iter().enumerate() {
            let dir = if campaigns.len() == 1 {
                args.out.clone()
            } else {
                args.out.join(format!("{i}_{}", c.manifest.config.model_id))
            };
            create_dir(&dir)?;
            let picks = if args.grid_lambdas.is_empty() {
                vec![c.manifest.config.lambdas.len() / 2]
            } else {
                args.grid_lambdas.clone()
            };
            render_grids(c, &dir, &picks)?;
        }
    }
    Ok(())
}
