use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use varm::data::{save_checkpoint, CheckpointMeta, IMAGE_SIDE};
use varm::models::Model;
use varm::objectives::{train_run, EpochRecord, ObjectiveKind, TrainConfig, DEFAULT_BETA_SWEEP};

use crate::common::{create_dir, write_json, DataSpec, CONFIG_FILE};
use crate::fail::{Failure, Outcome};

pub const TRACE_FILE: &str = "trace.csv";

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON run configuration.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Replaces the configuration's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// `key=value` replacing one configuration field; repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Train one model per beta of the default sweep into `beta_<b>`
    /// subdirectories.
    #[arg(long)]
    pub beta_sweep: bool,
}

/// Training configuration plus the dataset it runs on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRun {
    #[serde(flatten)]
    pub train: TrainConfig,
    #[serde(flatten)]
    pub data: DataSpec,
}

fn known_fields() -> Vec<String> {
    let sample = TrainRun {
        train: TrainConfig::new(ObjectiveKind::Vanilla, 1.0, 1, 1, 0),
        data: DataSpec::default(),
    };
    match serde_json::to_value(sample) {
        Ok(Value::Object(m)) => m.keys().cloned().collect(),
        _ => Vec::new(),
    }
}

fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Merges the file, overrides and seed into a validated run.
pub fn resolve(raw: &str, overrides: &[String], seed: Option<u64>) -> Outcome<TrainRun> {
    let mut map: Map<String, Value> = match serde_json::from_str(raw) {
        Ok(Value::Object(m)) => m,
        Ok(_) => return Err(Failure::config("config must be a JSON object")),
        Err(e) => return Err(Failure::config(format!("config is not valid JSON: {e}"))),
    };
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Failure::config(format!("override `{o}` is not of the form key=value")))?;
        map.insert(k.trim().to_string(), parse_value(v.trim()));
    }
    if let Some(s) = seed {
        map.insert("seed".into(), Value::from(s));
    }
    let known = known_fields();
    if let Some(k) = map.keys().find(|k| !known.contains(k)) {
        return Err(Failure::config(format!("invalid config field `{k}`: unknown field")));
    }
    let mut train_map = map.clone();
    let mut data_map = Map::new();
    for key in ["sprites", "data_seed"] {
        if let Some(v) = train_map.remove(key) {
            data_map.insert(key.into(), v);
        }
    }
    let train: TrainConfig = serde_path_to_error::deserialize(Value::Object(train_map))
        .map_err(|e| Failure::config(format!("invalid config field `{}`: {}", e.path(), e.inner())))?;
    let defaults = DataSpec::default();
    let sprites = match data_map.get("sprites") {
        None => defaults.sprites,
        Some(v) => v
            .as_u64()
            .map(|n| n as usize)
            .ok_or_else(|| Failure::config("invalid config field `sprites`: expected a positive integer"))?,
    };
    let data_seed = match data_map.get("data_seed") {
        None => defaults.data_seed,
        Some(v) => v
            .as_u64()
            .ok_or_else(|| Failure::config("invalid config field `data_seed`: expected an integer"))?,
    };
    train.validate()?;
    Ok(TrainRun {
        train,
        data: DataSpec { sprites, data_seed },
    })
}

fn write_trace(path: &Path, trace: &[EpochRecord], layers: usize) -> Outcome {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["epoch".to_string(), "steps".into(), "total".into(), "reconstruction".into()];
    header.extend((1..=layers).map(|i| format!("kl_{i}")));
    header.extend(["tc_estimate".into(), "mi_estimate".into(), "dimwise_kl".into()]);
    w.write_record(&header)?;
    for rec in trace {
        let r = &rec.report;
        let mut row = vec![rec.epoch.to_string(), rec.steps.to_string(), r.total.to_string(), r.reconstruction.to_string()];
        row.extend(r.kl_terms.iter().map(|v| v.to_string()));
        row.extend([r.tc_estimate.to_string(), r.mi_estimate.to_string(), r.dimwise_kl.to_string()]);
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Trains one model and writes its resolved config, trace and checkpoint.
pub fn train_one(run: &TrainRun, out: &Path) -> Outcome {
    create_dir(out)?;
    write_json(&out.join(CONFIG_FILE), run)?;
    let data = run.data.generate()?;
    let cfg = run.train.model_config(IMAGE_SIDE * IMAGE_SIDE, data.len())?;
    let mut model = Model::new(cfg, run.train.seed)?;
    let outcome = train_run(&mut model, &data.pixels, &run.train, None)?;
    write_trace(&out.join(TRACE_FILE), &outcome.trace, model.layers())?;
    let meta = CheckpointMeta {
        seed: run.train.seed,
        epoch: outcome.trace.len(),
        objective_hash: run.train.objective_hash(),
        run: Some(serde_json::to_value(run)?),
    };
    save_checkpoint(&model, out, &meta)?;
    match outcome.diverged {
        Some(msg) => Err(Failure::numeric(format!("training diverged: {msg}"))),
        None => Ok(()),
    }
}

pub fn sweep_dir(beta: f64) -> String {
    format!("beta_{beta}")
}

pub fn run(args: &TrainArgs) -> Outcome {
    let raw = fs::read_to_string(&args.config)
        .map_err(|e| Failure::config(format!("cannot read config {}: {e}", args.config.display())))?;
    if !args.beta_sweep {
        let run = resolve(&raw, &args.overrides, args.seed)?;
        return train_one(&run, &args.out);
    }
    let mut runs = Vec::with_capacity(DEFAULT_BETA_SWEEP.len());
    for beta in DEFAULT_BETA_SWEEP {
        let mut overrides = args.overrides.clone();
        overrides.push(format!("beta={beta}"));
        runs.push((beta, resolve(&raw, &overrides, args.seed)?));
    }
    create_dir(&args.out)?;
    let snapshot: Vec<&TrainRun> = runs.iter().map(|(_, r)| r).collect();
    write_json(&args.out.join(CONFIG_FILE), &snapshot)?;
    for (beta, run) in &runs {
        train_one(run, &args.out.join(sweep_dir(*beta)))?;
    }
    Ok(())
}
