//! Minibatch training with Adam.

use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{objective_with_grads, ObjectiveKind, ObjectiveReport, ObjectiveSpec};
use crate::data::{save_checkpoint, CheckpointMeta};
use crate::distributions::LikelihoodFamily;
use crate::error::{Error, Result};
use crate::models::{default_link_hidden, default_z_dims, Model, ModelConfig};
use crate::netcore::{apply_bn_updates, ParamStore};

fn default_lr() -> f64 {
    1e-3
}

fn default_free_bits() -> f64 {
    0.125
}

fn default_likelihood() -> LikelihoodFamily {
    LikelihoodFamily::BernoulliLogits
}

fn default_encoder_hidden() -> Vec<usize> {
    vec![256, 128]
}

fn default_decoder_hidden() -> Vec<usize> {
    vec![128, 256]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub objective: ObjectiveKind,
    pub beta: f64,
    #[serde(rename = "L")]
    pub layers: usize,
    /// Defaults to the tail of the standard width schedule.
    #[serde(default)]
    pub z_dims: Option<Vec<usize>>,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_free_bits")]
    pub free_bits: f64,
    pub seed: u64,
    #[serde(default = "default_likelihood")]
    pub likelihood: LikelihoodFamily,
    #[serde(default = "default_encoder_hidden")]
    pub encoder_hidden: Vec<usize>,
    #[serde(default = "default_decoder_hidden")]
    pub decoder_hidden: Vec<usize>,
    #[serde(default = "default_link_hidden")]
    pub link_hidden: Vec<usize>,
    #[serde(default)]
    pub batch_norm: bool,
    #[serde(default)]
    pub dlgm: bool,
}

impl TrainConfig {
    pub fn new(objective: ObjectiveKind, beta: f64, layers: usize, epochs: usize, seed: u64) -> Self {
        Self {
            objective,
            beta,
            layers,
            z_dims: None,
            epochs,
            batch_size: 64,
            lr: default_lr(),
            free_bits: default_free_bits(),
            seed,
            likelihood: default_likelihood(),
            encoder_hidden: default_encoder_hidden(),
            decoder_hidden: default_decoder_hidden(),
            link_hidden: default_link_hidden(),
            batch_norm: false,
            dlgm: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::config("L", "must be at least 1"));
        }
        if self.objective != ObjectiveKind::Seatbelt && self.layers != 1 {
            return Err(Error::config("L", "vanilla and beta-tc objectives need L = 1"));
        }
        if !(self.beta >= 1.0) || !self.beta.is_finite() {
            return Err(Error::config("beta", "must be a finite value >= 1"));
        }
        if self.objective == ObjectiveKind::Vanilla && self.beta != 1.0 {
            return Err(Error::config("beta", "vanilla objective requires beta = 1"));
        }
        if let Some(z) = &self.z_dims {
            if z.len() != self.layers {
                return Err(Error::config("z_dims", format!("expected {} entries", self.layers)));
            }
        } else if self.layers > 5 {
            return Err(Error::config("z_dims", "must be given explicitly for L > 5"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::config("lr", "must be positive"));
        }
        if !(self.free_bits >= 0.0) {
            return Err(Error::config("free_bits", "must be >= 0"));
        }
        Ok(())
    }

    pub fn model_config(&self, data_dim: usize, dataset_size: usize) -> Result<ModelConfig> {
        self.validate()?;
        let cfg = ModelConfig {
            z_dims: self.z_dims.clone().unwrap_or_else(|| default_z_dims(self.layers)),
            beta: self.beta,
            likelihood: self.likelihood,
            fixed_sigma: 1.0,
            encoder_hidden: self.encoder_hidden.clone(),
            decoder_hidden: self.decoder_hidden.clone(),
            link_hidden: self.link_hidden.clone(),
            leaky_slope: 0.2,
            batch_norm: self.batch_norm,
            free_bits: self.free_bits,
            data_dim,
            dataset_size,
            dlgm: self.dlgm,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn spec(&self) -> ObjectiveSpec {
        ObjectiveSpec::new(self.objective, self.beta, self.free_bits)
    }

    /// CRC32 of the objective-defining fields, hex encoded.
    pub fn objective_hash(&self) -> String {
        let key = format!(
            "{:?}|{}|{}|{}",
            self.objective, self.beta, self.layers, self.free_bits
        );
        format!("{:08x}", crc32fast::hash(key.as_bytes()))
    }
}

/// Adam with bias correction, ascending or descending as told.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(lr: f64, store: &ParamStore) -> Self {
        let zeros: Vec<Array2<f64>> = (0..store.len())
            .map(|i| Array2::zeros(store.shape(i)))
            .collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One descent step on `loss` given its gradients. Non-trainable
    /// entries are left alone.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Array2<f64>]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (i, g) in grads.iter().enumerate() {
            if !store.is_trainable(i) {
                continue;
            }
            let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
            ndarray::Zip::from(store.get_mut(i))
                .and(&mut self.m[i])
                .and(&mut self.v[i])
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let update = lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                    *p = (*p - update) as f32 as f64;
                });
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    /// Mean over the epoch's minibatches.
    pub report: ObjectiveReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub trace: Vec<EpochRecord>,
    /// Set when a non-finite objective stopped training; the model holds the
    /// parameters from the end of the last complete epoch.
    pub diverged: Option<String>,
}

/// Draws standard-normal noise for every layer of a minibatch.
pub fn sample_eps(rng: &mut impl Rng, rows: usize, z_dims: &[usize]) -> Vec<Array2<f64>> {
    z_dims
        .iter()
        .map(|&k| Array2::from_shape_simple_fn((rows, k), || rng.sample(StandardNormal)))
        .collect()
}

fn add_report(acc: &mut ObjectiveReport, r: &ObjectiveReport) {
    acc.total += r.total;
    acc.reconstruction += r.reconstruction;
    if acc.kl_terms.is_empty() {
        acc.kl_terms = vec![0.0; r.kl_terms.len()];
    }
    for (a, b) in acc.kl_terms.iter_mut().zip(&r.kl_terms) {
        *a += b;
    }
    acc.tc_estimate += r.tc_estimate;
    acc.mi_estimate += r.mi_estimate;
    acc.dimwise_kl += r.dimwise_kl;
}

fn scale_report(r: &mut ObjectiveReport, s: f64) {
    r.total *= s;
    r.reconstruction *= s;
    r.kl_terms.iter_mut().for_each(|v| *v *= s);
    r.tc_estimate *= s;
    r.mi_estimate *= s;
    r.dimwise_kl *= s;
}

/// Trains `model` in place on the rows of `data`. Each epoch visits a fresh
/// permutation; a trailing partial minibatch is dropped. When `checkpoint`
/// is given the final (or last good) parameters are written there.
pub fn train_run(
    model: &mut Model,
    data: &Array2<f64>,
    config: &TrainConfig,
    checkpoint: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let n = data.nrows();
    if data.ncols() != model.config.data_dim {
        return Err(Error::arg(format!(
            "dataset width {} differs from model data_dim {}",
            data.ncols(),
            model.config.data_dim
        )));
    }
    let m = config.batch_size.min(n);
    if m == 0 {
        return Err(Error::arg("empty dataset"));
    }
    let spec = config.spec();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut adam = Adam::new(config.lr, &model.params);
    let mut order: Vec<usize> = (0..n).collect();
    let mut trace = Vec::with_capacity(config.epochs);
    let mut last_good = model.params.clone();
    let mut diverged = None;

    'epochs: for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut acc = ObjectiveReport::default();
        let mut steps = 0;
        for chunk in order.chunks_exact(m) {
            let batch = data.select(Axis(0), chunk);
            let eps = sample_eps(&mut rng, m, &model.config.z_dims);
            let step = objective_with_grads(model, &spec, &batch, &eps, true);
            let step = match step {
                Ok(s) if s.report.is_finite() && s.grads.iter().all(|g| g.iter().all(|v| v.is_finite())) => s,
                Ok(_) => {
                    diverged = Some(format!("non-finite objective or gradient in epoch {epoch}"));
                    break 'epochs;
                }
                Err(e @ Error::Numeric { .. }) => {
                    diverged = Some(format!("epoch {epoch}: {e}"));
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            let neg: Vec<Array2<f64>> = step.grads.iter().map(|g| -g).collect();
            adam.step(&mut model.params, &neg);
            apply_bn_updates(&mut model.params, &step.bn_updates);
            add_report(&mut acc, &step.report);
            steps += 1;
        }
        scale_report(&mut acc, 1.0 / steps as f64);
        trace.push(EpochRecord {
            epoch,
            steps,
            report: acc,
        });
        last_good = model.params.clone();
    }
    if diverged.is_some() {
        model.params = last_good;
    }
    if let Some(dir) = checkpoint {
        let meta = CheckpointMeta {
            seed: config.seed,
            epoch: trace.len(),
            objective_hash: config.objective_hash(),
            run: Some(serde_json::to_value(config)?),
        };
        save_checkpoint(model, dir, &meta)?;
    }
    Ok(TrainOutcome { trace, diverged })
}
