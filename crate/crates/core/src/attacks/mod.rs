//! Adversarial objectives against trained models and their optimisation.
//!
//! Latent attacks match the posterior of a distorted input to a target's
//! posterior; output attacks match the reconstruction directly. Both pay
//! `lambda * ||d||_2` for the distortion.

mod campaign;
pub mod lbfgsb;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distributions::{kl_diag_var, DiagGaussian};
use crate::error::{ensure_dims, Error, Result};
use crate::evaluation::neg_target_loglik;
use crate::models::{row_matrix, Model};
use crate::objectives::sample_eps;

pub use campaign::{
    attack_campaign, cell_name, read_distortion, sample_pairs, CampaignConfig, CampaignManifest, CampaignReport, CellOutcome, CellRecord,
    CAMPAIGN_CSV, CAMPAIGN_MANIFEST,
};
use lbfgsb::{minimize, LbfgsbOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackMode {
    /// All layers of a hierarchical model; the single layer otherwise.
    Latent,
    LatentAllLayers,
    LatentTop,
    LatentBottom,
    Output,
}

impl std::str::FromStr for AttackMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "latent" => Self::Latent,
            "latent-all-layers" => Self::LatentAllLayers,
            "latent-top" => Self::LatentTop,
            "latent-bottom" => Self::LatentBottom,
            "output" => Self::Output,
            other => return Err(Error::config("mode", format!("unknown attack mode `{other}`"))),
        })
    }
}

impl std::fmt::Display for AttackMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Self::Latent => "latent",
            Self::LatentAllLayers => "latent-all-layers",
            Self::LatentTop => "latent-top",
            Self::LatentBottom => "latent-bottom",
            Self::Output => "output",
        };
        f.write_str(s)
    }
}

impl AttackMode {
    /// One-based layer indices attacked on a model with `layers` layers, or
    /// `None` for the output attack.
    pub fn layers(self, layers: usize) -> Option<Vec<usize>> {
        match self {
            Self::Latent | Self::LatentAllLayers => Some((1..=layers).collect()),
            Self::LatentTop => Some(vec![layers]),
            Self::LatentBottom => Some(vec![1]),
            Self::Output => None,
        }
    }
}

/// Input/target pairs sampled per campaign by default.
pub const DEFAULT_PAIRS: usize = 10;

/// `count` grid indices spread evenly from the first to the last value; a
/// single index picks the middle of the grid.
pub fn lambda_subset(count: usize) -> Result<Vec<usize>> {
    match count {
        0 => Err(Error::arg("need at least one lambda")),
        1 => Ok(vec![24]),
        c if c > 50 => Err(Error::arg("the grid has 50 values")),
        c => Ok((0..c).map(|i| ((49 * i) as f64 / (c - 1) as f64).round() as usize).collect()),
    }
}

/// `2^(-20 + 40 k / 49)` for `k = 0..50`.
pub fn lambda_grid() -> Vec<f64> {
    (0..50).map(|k| 2f64.powf(-20.0 + 40.0 * k as f64 / 49.0)).collect()
}

fn check_box(what: &str, x: &[f64]) -> Result<()> {
    if x.iter().any(|v| !(-1.0..=1.0).contains(v)) {
        return Err(Error::arg(format!("{what} lies outside [-1, 1]")));
    }
    Ok(())
}

enum Target {
    Latent {
        /// Zero-based layer indices.
        layers: Vec<usize>,
        posteriors: Vec<DiagGaussian>,
        eps: Option<Vec<Array2<f64>>>,
    },
    Output(Vec<f64>),
}

/// Loss value split into its parts, with the gradient in `d` if requested.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackEval {
    pub loss: f64,
    /// Summed KL for latent modes, reconstruction distance for the output
    /// mode.
    pub term: f64,
    pub d_norm: f64,
    pub grad: Option<Vec<f64>>,
}

/// An attack loss bound to a model, an input and a target.
pub struct AttackObjective<'a> {
    model: &'a Model,
    x: Vec<f64>,
    lambda: f64,
    target: Target,
}

impl<'a> AttackObjective<'a> {
    /// `mode` picks the layer set. With `stochastic = Some(seed)` every
    /// layer below the first is evaluated at a fixed reparameterised sample
    /// (shared by input and target) instead of the conditional mean.
    pub fn new(
        model: &'a Model,
        x: &[f64],
        x_target: &[f64],
        lambda: f64,
        mode: AttackMode,
        stochastic: Option<u64>,
    ) -> Result<Self> {
        match mode.layers(model.layers()) {
            Some(layers) => Self::latent(model, x, x_target, lambda, &layers, stochastic),
            None => {
                Self::check_inputs(model, x, x_target, lambda)?;
                Ok(Self {
                    model,
                    x: x.to_vec(),
                    lambda,
                    target: Target::Output(x_target.to_vec()),
                })
            }
        }
    }

    /// Latent loss over the given one-based layers.
    pub fn latent(
        model: &'a Model,
        x: &[f64],
        x_target: &[f64],
        lambda: f64,
        layers: &[usize],
        stochastic: Option<u64>,
    ) -> Result<Self> {
        Self::check_inputs(model, x, x_target, lambda)?;
        let n = model.layers();
        if layers.is_empty() || layers.iter().any(|&l| l == 0 || l > n) {
            return Err(Error::arg(format!("layer set {layers:?} invalid for a {n}-layer model")));
        }
        let mut zero_based: Vec<usize> = layers.iter().map(|l| l - 1).collect();
        zero_based.sort_unstable();
        zero_based.dedup();
        let eps = stochastic.map(|seed| sample_eps(&mut ChaCha8Rng::seed_from_u64(seed), 1, &model.config.z_dims));
        let posteriors = match &eps {
            None => model.mean_chain(x_target)?,
            Some(e) => {
                let rows: Vec<Vec<f64>> = e.iter().map(|a| a.row(0).to_vec()).collect();
                model.infer_chain(x_target, &rows)?.posteriors
            }
        };
        Ok(Self {
            model,
            x: x.to_vec(),
            lambda,
            target: Target::Latent {
                layers: zero_based,
                posteriors,
                eps,
            },
        })
    }

    fn check_inputs(model: &Model, x: &[f64], x_target: &[f64], lambda: f64) -> Result<()> {
        ensure_dims("attack input", x.len(), model.config.data_dim)?;
        ensure_dims("attack target", x_target.len(), model.config.data_dim)?;
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::arg("lambda must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn eval(&self, d: &[f64], grad: bool) -> Result<AttackEval> {
        ensure_dims("distortion", d.len(), self.x.len())?;
        let mut g = self.model.graph(false, false);
        let dv = g.tape.row(d, grad);
        let xc = g.tape.constant(row_matrix(&self.x));
        let xin = g.tape.add(xc, dv);
        let term = match &self.target {
            Target::Latent {
                layers,
                posteriors,
                eps,
            } => {
                let chain = self.model.chain_vars(&mut g, xin, eps.as_deref())?;
                let mut acc = None;
                for &i in layers {
                    let tm = g.tape.row(&posteriors[i].mean, false);
                    let tl = g.tape.row(&posteriors[i].log_var, false);
                    let post = chain[i].posterior;
                    let kl = kl_diag_var(&mut g.tape, post.mean, post.log_var, tm, tl);
                    let kl = g.tape.sum(kl);
                    acc = Some(match acc {
                        None => kl,
                        Some(a) => g.tape.add(a, kl),
                    });
                }
                acc.expect("non-empty layer set")
            }
            Target::Output(target) => {
                let recon = self.model.reconstruct_vars(&mut g, xin)?;
                let t = g.tape.row(target, false);
                let diff = g.tape.sub(recon, t);
                g.tape.norm(diff)
            }
        };
        let norm = g.tape.norm(dv);
        let penalty = g.tape.scale(norm, self.lambda);
        let loss = g.tape.add(term, penalty);
        let value = g.tape.scalar(loss);
        if !value.is_finite() {
            return Err(Error::numeric("attack loss"));
        }
        let grad = grad.then(|| {
            let grads = g.tape.backward(loss);
            grads.get(dv).map(|a| a.iter().copied().collect()).unwrap_or_else(|| vec![0.0; d.len()])
        });
        Ok(AttackEval {
            loss: value,
            term: g.tape.scalar(term),
            d_norm: g.tape.scalar(norm),
            grad,
        })
    }
}

/// `KL(q(z | x + d) || q(z | x_target)) + lambda ||d||_2` for single-layer
/// models.
pub fn latent_attack_loss(model: &Model, x: &[f64], d: &[f64], x_target: &[f64], lambda: f64) -> Result<f64> {
    if model.layers() != 1 {
        return Err(Error::arg("latent_attack_loss needs a single-layer model"));
    }
    Ok(AttackObjective::latent(model, x, x_target, lambda, &[1], None)?.eval(d, false)?.loss)
}

/// Sum of per-layer KLs along the mean chain over the one-based `layers`,
/// plus `lambda ||d||_2`.
pub fn seatbelt_attack_loss(
    model: &Model,
    x: &[f64],
    d: &[f64],
    x_target: &[f64],
    lambda: f64,
    layers: &[usize],
) -> Result<f64> {
    Ok(AttackObjective::latent(model, x, x_target, lambda, layers, None)?.eval(d, false)?.loss)
}

/// `||reconstruct(x + d) - x_target||_2 + lambda ||d||_2`.
pub fn output_attack_loss(model: &Model, x: &[f64], d: &[f64], x_target: &[f64], lambda: f64) -> Result<f64> {
    Ok(AttackObjective::new(model, x, x_target, lambda, AttackMode::Output, None)?.eval(d, false)?.loss)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub x: Vec<f64>,
    pub x_target: Vec<f64>,
    pub lambda: f64,
    pub mode: AttackMode,
    pub max_iters: usize,
    pub tol: f64,
    /// Seed for single-sample evaluation of the lower layers; `None` uses
    /// the deterministic mean chain.
    pub stochastic: Option<u64>,
}

impl AttackSpec {
    pub fn new(x: Vec<f64>, x_target: Vec<f64>, lambda: f64, mode: AttackMode) -> Self {
        Self {
            x,
            x_target,
            lambda,
            mode,
            max_iters: 1000,
            tol: 1e-9,
            stochastic: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure_dims("attack target", self.x_target.len(), self.x.len())?;
        check_box("attack input", &self.x)?;
        check_box("attack target", &self.x_target)?;
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(Error::arg("lambda must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub d: Vec<f64>,
    pub x_star: Vec<f64>,
    /// Δ, the attacker's objective at `d`.
    pub final_loss: f64,
    /// KL part of Δ (reconstruction distance for the output mode).
    pub kl_term: f64,
    pub d_norm: f64,
    pub neg_target_loglik: f64,
    pub iterations: usize,
    pub converged: bool,
    pub diverged: bool,
    /// Best loss after each iteration.
    pub trace: Vec<f64>,
}

/// Minimises the mode's loss over `d` with `x + d` kept in `[-1, 1]`,
/// starting from `d = 0`.
pub fn optimize_attack(model: &Model, spec: &AttackSpec) -> Result<AttackResult> {
    spec.validate()?;
    let objective = AttackObjective::new(model, &spec.x, &spec.x_target, spec.lambda, spec.mode, spec.stochastic)?;
    let n = spec.x.len();
    let lo: Vec<f64> = spec.x.iter().map(|v| -1.0 - v).collect();
    let hi: Vec<f64> = spec.x.iter().map(|v| 1.0 - v).collect();
    let opts = LbfgsbOptions {
        max_iters: spec.max_iters,
        tol: spec.tol,
        ..Default::default()
    };
    let run = minimize(
        |d| match objective.eval(d, true) {
            Ok(e) => (e.loss, e.grad.expect("gradient requested")),
            Err(_) => (f64::NAN, vec![f64::NAN; n]),
        },
        &vec![0.0; n],
        &lo,
        &hi,
        &opts,
    );
    let x_star: Vec<f64> = spec.x.iter().zip(&run.x).map(|(a, b)| (a + b).clamp(-1.0, 1.0)).collect();
    let d: Vec<f64> = x_star.iter().zip(&spec.x).map(|(a, b)| a - b).collect();
    let end = objective.eval(&d, false)?;
    Ok(AttackResult {
        final_loss: end.term + spec.lambda * end.d_norm,
        kl_term: end.term,
        d_norm: end.d_norm,
        neg_target_loglik: neg_target_loglik(model, &spec.x_target, &x_star)?,
        iterations: run.iterations,
        converged: run.converged,
        diverged: run.diverged,
        trace: run.trace,
        d,
        x_star,
    })
}
