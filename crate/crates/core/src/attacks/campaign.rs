//! Resumable sweeps of attacks over input/target pairs and penalty weights.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{optimize_attack, AttackMode, AttackSpec};
use crate::error::{Error, Result};
use crate::evaluation::{format_z_dims, recon_l2, write_metric_rows, MetricRow};
use crate::models::Model;

pub const CAMPAIGN_MANIFEST: &str = "manifest.json";
pub const CAMPAIGN_CSV: &str = "campaign.csv";
const CELLS_DIR: &str = "cells";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignConfig {
    pub model_id: String,
    #[serde(default)]
    pub checkpoint: Option<String>,
    pub mode: AttackMode,
    pub seed: u64,
    /// `(input, target)` row indices into the dataset.
    pub pairs: Vec<(usize, usize)>,
    pub lambdas: Vec<f64>,
    pub max_iters: usize,
    pub tol: f64,
    #[serde(default)]
    pub stochastic: bool,
    /// Free-form description of the dataset the indices refer to.
    #[serde(default)]
    pub data: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignManifest {
    pub format_version: u32,
    #[serde(flatten)]
    pub config: CampaignConfig,
}

/// Everything persisted for one `(pair, lambda)` cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub pair: usize,
    pub lambda_index: usize,
    pub lambda: f64,
    pub input_index: usize,
    pub target_index: usize,
    /// Set when the attack itself failed; `outcome` is then absent.
    pub error: Option<String>,
    pub outcome: Option<CellOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellOutcome {
    pub final_loss: f64,
    pub kl_term: f64,
    pub d_norm: f64,
    pub neg_target_loglik: f64,
    pub iterations: usize,
    pub converged: bool,
    pub diverged: bool,
    pub trace: Vec<f64>,
    pub metrics: MetricRow,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CampaignReport {
    pub total_cells: usize,
    /// Cells computed by this call.
    pub ran: usize,
    /// Cells found complete on disk.
    pub skipped: usize,
    pub failed: usize,
    pub complete: bool,
    /// Metric rows of every successful cell, ordered by pair then lambda,
    /// when the campaign is complete.
    pub rows: Vec<MetricRow>,
}

/// `count` disjoint `(input, target)` pairs of distinct rows.
pub fn sample_pairs(n: usize, count: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
    if 2 * count > n {
        return Err(Error::arg(format!("{count} pairs need {} rows, dataset has {n}", 2 * count)));
    }
    let picks = index::sample(&mut ChaCha8Rng::seed_from_u64(seed), n, 2 * count).into_vec();
    Ok(picks.chunks_exact(2).map(|c| (c[0], c[1])).collect())
}

pub fn cell_name(pair: usize, lambda_index: usize) -> String {
    format!("p{pair:03}_l{lambda_index:02}")
}

fn cell_paths(dir: &Path, pair: usize, lambda_index: usize) -> (PathBuf, PathBuf) {
    let base = dir.join(CELLS_DIR).join(cell_name(pair, lambda_index));
    (base.with_extension("json"), base.with_extension("d.bin"))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read_cell(path: &Path) -> Option<CellRecord> {
    let bytes = fs::read(path).ok()?;
    serde_json::from_slice(&bytes).ok()
}

fn thread_count() -> usize {
    let available = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    std::env::var("VARM_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .map_or(available, |n| n.min(available))
}

fn run_cell(model: &Model, data: &Array2<f64>, cfg: &CampaignConfig, pair: usize, li: usize) -> (CellRecord, Vec<f64>) {
    let (a, b) = cfg.pairs[pair];
    let lambda = cfg.lambdas[li];
    let x = data.row(a).to_vec();
    let xt = data.row(b).to_vec();
    let mut spec = AttackSpec::new(x.clone(), xt.clone(), lambda, cfg.mode);
    spec.max_iters = cfg.max_iters;
    spec.tol = cfg.tol;
    if cfg.stochastic {
        spec.stochastic = Some(cfg.seed.wrapping_add((pair * 1000 + li) as u64));
    }
    let mut record = CellRecord {
        pair,
        lambda_index: li,
        lambda,
        input_index: a,
        target_index: b,
        error: None,
        outcome: None,
    };
    let outcome = optimize_attack(model, &spec).and_then(|r| {
        let l2_adv = recon_l2(model, &r.x_star, &xt)?;
        let l2_clean = recon_l2(model, &x, &x)?;
        Ok((r, l2_adv, l2_clean))
    });
    match outcome {
        Ok((r, l2_adv, l2_clean)) => {
            let metrics = MetricRow {
                model_id: cfg.model_id.clone(),
                beta: model.config.beta,
                layers: model.layers(),
                z_dims: format_z_dims(&model.config.z_dims),
                lambda,
                pair,
                delta: r.final_loss,
                neg_loglik: r.neg_target_loglik,
                l2_adv,
                l2_clean,
                seed: cfg.seed,
            };
            record.outcome = Some(CellOutcome {
                final_loss: r.final_loss,
                kl_term: r.kl_term,
                d_norm: r.d_norm,
                neg_target_loglik: r.neg_target_loglik,
                iterations: r.iterations,
                converged: r.converged,
                diverged: r.diverged,
                trace: r.trace,
                metrics,
            });
            (record, r.d)
        }
        Err(e) => {
            record.error = Some(e.to_string());
            (record, Vec::new())
        }
    }
}

fn persist(dir: &Path, record: &CellRecord, d: &[f64]) -> Result<()> {
    let (json, blob) = cell_paths(dir, record.pair, record.lambda_index);
    let bytes: Vec<u8> = d.iter().flat_map(|v| (*v as f32).to_le_bytes()).collect();
    write_atomic(&blob, &bytes)?;
    write_atomic(&json, &serde_json::to_vec_pretty(record)?)
}

/// Reads a cell's distortion blob.
pub fn read_distortion(dir: &Path, pair: usize, lambda_index: usize) -> Result<Vec<f64>> {
    let (_, blob) = cell_paths(dir, pair, lambda_index);
    let bytes = fs::read(&blob).map_err(|e| Error::io(&blob, e))?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect())
}

/// Runs every `(pair, lambda)` cell not already on disk under `out_dir`,
/// computing at most `limit` new cells. Cells run in parallel on up to
/// `VARM_THREADS` threads. Once every cell exists the rows are written to
/// `campaign.csv`, always re-read from the cell files so that interrupted
/// and uninterrupted runs produce the same bytes.
pub fn attack_campaign(
    model: &Model,
    data: &Array2<f64>,
    cfg: &CampaignConfig,
    out_dir: &Path,
    limit: Option<usize>,
) -> Result<CampaignReport> {
    if cfg.pairs.is_empty() || cfg.lambdas.is_empty() {
        return Err(Error::arg("campaign needs at least one pair and one lambda"));
    }
    if let Some(&(a, b)) = cfg.pairs.iter().find(|(a, b)| *a >= data.nrows() || *b >= data.nrows()) {
        return Err(Error::arg(format!("pair ({a}, {b}) indexes past {} rows", data.nrows())));
    }
    let cells_dir = out_dir.join(CELLS_DIR);
    fs::create_dir_all(&cells_dir).map_err(|e| Error::io(&cells_dir, e))?;
    let manifest = CampaignManifest {
        format_version: FORMAT_VERSION,
        config: cfg.clone(),
    };
    let mpath = out_dir.join(CAMPAIGN_MANIFEST);
    if let Ok(bytes) = fs::read(&mpath) {
        let existing: CampaignManifest = serde_json::from_slice(&bytes)?;
        if existing != manifest {
            return Err(Error::Integrity {
                path: mpath,
                reason: "existing campaign was started with a different configuration".into(),
            });
        }
    } else {
        write_atomic(&mpath, &serde_json::to_vec_pretty(&manifest)?)?;
    }

    let all: Vec<(usize, usize)> = (0..cfg.pairs.len())
        .flat_map(|p| (0..cfg.lambdas.len()).map(move |l| (p, l)))
        .collect();
    let pending: Vec<(usize, usize)> = all
        .iter()
        .copied()
        .filter(|&(p, l)| read_cell(&cell_paths(out_dir, p, l).0).is_none())
        .collect();
    let skipped = all.len() - pending.len();
    let todo = &pending[..limit.unwrap_or(usize::MAX).min(pending.len())];

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count())
        .build()
        .map_err(|e| Error::arg(format!("thread pool: {e}")))?;
    pool.install(|| {
        todo.par_iter()
            .map(|&(p, l)| {
                let (record, d) = run_cell(model, data, cfg, p, l);
                persist(out_dir, &record, &d)
            })
            .collect::<Result<Vec<()>>>()
    })?;

    let mut records = Vec::with_capacity(all.len());
    for &(p, l) in &all {
        if let Some(r) = read_cell(&cell_paths(out_dir, p, l).0) {
            records.push(r);
        }
    }
    let complete = records.len() == all.len();
    let failed = records.iter().filter(|r| r.error.is_some()).count();
    let rows: Vec<MetricRow> = if complete {
        records.into_iter().filter_map(|r| r.outcome.map(|o| o.metrics)).collect()
    } else {
        Vec::new()
    };
    if complete {
        write_metric_rows(&out_dir.join(CAMPAIGN_CSV), &rows)?;
    }
    Ok(CampaignReport {
        total_cells: all.len(),
        ran: todo.len(),
        skipped,
        failed,
        complete,
        rows,
    })
}
