//! Training objectives: the evidence lower bound, its total-correlation
//! penalised variant, the hierarchical Seatbelt bound in compact and
//! decomposed form, free bits, and the trainer.
//!
//! All latent terms use single-sample log-density differences
//! `log q(z | .) - log p(z | .)` evaluated at the reparameterised samples, so
//! the compact and decomposed forms agree exactly on shared samples. The
//! data-entropy constant is dropped everywhere.

mod mws;
mod train;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::Model;
use crate::netcore::{BnUpdate, Graph};
use crate::tape::Var;

pub use mws::{mws_log_q_aggregate, MinibatchContext, MwsEstimate};
pub use train::{sample_eps, train_run, Adam, EpochRecord, TrainConfig, TrainOutcome};

/// Penalty weights visited by a default sweep.
pub const DEFAULT_BETA_SWEEP: [f64; 6] = [1.0, 2.0, 4.0, 6.0, 8.0, 10.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectiveKind {
    Vanilla,
    BetaTc,
    Seatbelt,
}

impl std::str::FromStr for ObjectiveKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(Self::Vanilla),
            "beta-tc" => Ok(Self::BetaTc),
            "seatbelt" => Ok(Self::Seatbelt),
            other => Err(Error::config("objective", format!("unknown objective `{other}`"))),
        }
    }
}

/// Everything needed to evaluate one objective on one minibatch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveSpec {
    pub kind: ObjectiveKind,
    pub beta: f64,
    pub free_bits: f64,
    /// Evaluate the five-term Seatbelt form instead of the compact one.
    pub decomposed: bool,
}

impl ObjectiveSpec {
    pub fn new(kind: ObjectiveKind, beta: f64, free_bits: f64) -> Self {
        Self {
            kind,
            beta,
            free_bits,
            decomposed: false,
        }
    }

    fn validate(&self, model: &Model) -> Result<()> {
        let layers = model.layers();
        match self.kind {
            ObjectiveKind::Vanilla | ObjectiveKind::BetaTc if layers != 1 => {
                return Err(Error::arg(format!(
                    "{:?} objective needs a single-layer model, got {layers} layers",
                    self.kind
                )))
            }
            _ => {}
        }
        if self.decomposed && (self.kind != ObjectiveKind::Seatbelt || layers < 2) {
            return Err(Error::arg("decomposed form needs a Seatbelt model with L >= 2"));
        }
        if !(self.beta >= 1.0) {
            return Err(Error::arg(format!("beta must be >= 1, got {}", self.beta)));
        }
        if !(self.free_bits >= 0.0) {
            return Err(Error::arg("free-bits threshold must be >= 0"));
        }
        Ok(())
    }
}

/// Minibatch averages of the objective and its components, in nats.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveReport {
    pub total: f64,
    /// `E log p(x | z)`.
    pub reconstruction: f64,
    /// Per-layer `E [log q(z^i | .) - log p(z^i | .)]`, before free bits.
    pub kl_terms: Vec<f64>,
    /// Total correlation of the top-layer aggregate posterior.
    pub tc_estimate: f64,
    /// Mutual information between the top layer and its conditioning input.
    pub mi_estimate: f64,
    /// Dimension-wise KL of the top-layer aggregate marginals to the prior.
    pub dimwise_kl: f64,
}

impl ObjectiveReport {
    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
            && self.reconstruction.is_finite()
            && self.tc_estimate.is_finite()
            && self.kl_terms.iter().all(|v| v.is_finite())
    }

    /// Signed sum of the decomposed components with TC weight `beta`.
    pub fn decomposed_total(&self, beta: f64) -> f64 {
        let n = self.kl_terms.len();
        let intermediate: f64 = self.kl_terms[..n - 1].iter().sum();
        self.reconstruction - intermediate - self.mi_estimate - self.dimwise_kl - beta * self.tc_estimate
    }
}

/// `max(kl, threshold)` per element.
pub fn free_bits_apply(kl_per_dim: &[f64], threshold: f64) -> Result<Vec<f64>> {
    if !(threshold >= 0.0) {
        return Err(Error::arg("free-bits threshold must be >= 0"));
    }
    Ok(kl_per_dim.iter().map(|k| k.max(threshold)).collect())
}

/// Builds the objective on `g` and returns the scalar node to maximise.
pub fn objective_graph(
    model: &Model,
    g: &mut Graph,
    spec: &ObjectiveSpec,
    batch: &Array2<f64>,
    eps: &[Array2<f64>],
) -> Result<(Var, ObjectiveReport)> {
    spec.validate(model)?;
    let m = batch.nrows();
    let ctx = MinibatchContext::new(m, model.config.dataset_size.max(m))?;
    let x = g.tape.constant(batch.clone());
    let chain = model.chain_vars(g, x, Some(eps))?;
    let samples: Vec<Var> = chain.iter().map(|l| l.sample).collect();
    let n_layers = chain.len();
    let inv_m = 1.0 / m as f64;

    let ll = model.log_likelihood_rows(g, x, &samples)?;
    let recon = g.tape.mean(ll);

    let log_p = model.prior_log_density_vars(g, &samples)?;
    let mut log_q = Vec::with_capacity(n_layers);
    let mut kl_layer = Vec::with_capacity(n_layers);
    let mut kl_values = Vec::with_capacity(n_layers);
    for (i, layer) in chain.iter().enumerate() {
        let q = layer.posterior;
        let lq = g.tape.gauss_log_density(layer.sample, q.mean, q.log_var);
        let diff = g.tape.sub(lq, log_p[i]);
        let per_dim = g.tape.col_sums(diff);
        let per_dim = g.tape.scale(per_dim, inv_m);
        kl_values.push(g.tape.value(per_dim).sum());
        let floored = if spec.free_bits > 0.0 {
            g.tape.max_const(per_dim, spec.free_bits)
        } else {
            per_dim
        };
        let kl = g.tape.sum(floored);
        log_q.push(lq);
        kl_layer.push(kl);
    }

    // aggregate-posterior terms on the top layer
    let top = chain[n_layers - 1];
    let mws = g.tape.mws(top.sample, top.posterior.mean, top.posterior.log_var, ctx.dataset_size());
    let joint = g.tape.cols(mws, 0, 1);
    let marginals = g.tape.cols(mws, 1, 1);
    let tc_rows = g.tape.sub(joint, marginals);
    let tc = g.tape.mean(tc_rows);
    let lq_top = g.tape.row_sums(log_q[n_layers - 1]);
    let mi_rows = g.tape.sub(lq_top, joint);
    let mi = g.tape.mean(mi_rows);
    let lp_top = g.tape.row_sums(log_p[n_layers - 1]);
    let dw_rows = g.tape.sub(marginals, lp_top);
    let dimwise = g.tape.mean(dw_rows);

    let (tc_val, mi_val, dw_val) = (
        g.tape.scalar(tc),
        g.tape.scalar(mi),
        g.tape.scalar(dimwise),
    );
    if !tc_val.is_finite() {
        return Err(Error::numeric("total-correlation estimate"));
    }

    let mut total = recon;
    if spec.decomposed {
        for kl in &kl_layer[..n_layers - 1] {
            total = g.tape.sub(total, *kl);
        }
        total = g.tape.sub(total, mi);
        total = g.tape.sub(total, dimwise);
        let weighted = g.tape.scale(tc, spec.beta);
        total = g.tape.sub(total, weighted);
    } else {
        for kl in &kl_layer {
            total = g.tape.sub(total, *kl);
        }
        let weight = match spec.kind {
            ObjectiveKind::Vanilla => 0.0,
            _ => spec.beta - 1.0,
        };
        if weight != 0.0 {
            let penalty = g.tape.scale(tc, weight);
            total = g.tape.sub(total, penalty);
        }
    }
    let total_val = g.tape.scalar(total);
    if !total_val.is_finite() {
        return Err(Error::numeric("objective"));
    }
    let report = ObjectiveReport {
        total: total_val,
        reconstruction: g.tape.scalar(recon),
        kl_terms: kl_values,
        tc_estimate: tc_val,
        mi_estimate: mi_val,
        dimwise_kl: dw_val,
    };
    Ok((total, report))
}

/// Objective value, parameter gradients (of the value to maximise) and any
/// batch-norm statistics recorded in train mode.
pub struct ObjectiveGrad {
    pub report: ObjectiveReport,
    pub grads: Vec<Array2<f64>>,
    pub bn_updates: Vec<BnUpdate>,
}

pub fn objective_with_grads(
    model: &Model,
    spec: &ObjectiveSpec,
    batch: &Array2<f64>,
    eps: &[Array2<f64>],
    train: bool,
) -> Result<ObjectiveGrad> {
    let mut g = model.graph(true, train);
    let (total, report) = objective_graph(model, &mut g, spec, batch, eps)?;
    let grads = g.tape.backward(total);
    let grads = g.param_grads(&grads, &model.params);
    Ok(ObjectiveGrad {
        report,
        grads,
        bn_updates: g.take_bn_updates(),
    })
}

pub fn evaluate(
    model: &Model,
    spec: &ObjectiveSpec,
    batch: &Array2<f64>,
    eps: &[Array2<f64>],
) -> Result<ObjectiveReport> {
    let mut g = model.graph(false, false);
    Ok(objective_graph(model, &mut g, spec, batch, eps)?.1)
}

fn check_ctx(ctx: &MinibatchContext, batch: &Array2<f64>, model: &Model) -> Result<()> {
    if ctx.batch_size() != batch.nrows() {
        return Err(Error::arg(format!(
            "context batch size {} but minibatch has {} rows",
            ctx.batch_size(),
            batch.nrows()
        )));
    }
    if ctx.dataset_size() != model.config.dataset_size {
        return Err(Error::arg("context dataset size differs from model config"));
    }
    Ok(())
}

/// `E log p(x | z) - KL(q(z | x) || N(0, I))`, one sample per datapoint.
pub fn elbo_vanilla(model: &Model, batch: &Array2<f64>, eps: &[Array2<f64>]) -> Result<ObjectiveReport> {
    let spec = ObjectiveSpec::new(ObjectiveKind::Vanilla, 1.0, model.config.free_bits);
    evaluate(model, &spec, batch, eps)
}

/// ELBO minus `(beta - 1)` times the minibatch total-correlation estimate.
pub fn beta_tc_elbo(
    model: &Model,
    batch: &Array2<f64>,
    beta: f64,
    ctx: &MinibatchContext,
    eps: &[Array2<f64>],
) -> Result<ObjectiveReport> {
    check_ctx(ctx, batch, model)?;
    let spec = ObjectiveSpec::new(ObjectiveKind::BetaTc, beta, model.config.free_bits);
    evaluate(model, &spec, batch, eps)
}

/// Hierarchical ELBO with the top-layer total correlation up-weighted.
pub fn seatbelt_elbo(
    model: &Model,
    batch: &Array2<f64>,
    beta: f64,
    ctx: &MinibatchContext,
    eps: &[Array2<f64>],
) -> Result<ObjectiveReport> {
    check_ctx(ctx, batch, model)?;
    let spec = ObjectiveSpec::new(ObjectiveKind::Seatbelt, beta, model.config.free_bits);
    evaluate(model, &spec, batch, eps)
}

/// Five-term form: reconstruction, intermediate KLs, top-layer mutual
/// information, dimension-wise KL and `beta`-weighted total correlation.
///
/// Free bits apply to the intermediate layers only; the top-layer KL is
/// split into components and has no per-dimension floor here.
pub fn seatbelt_elbo_decomposed(
    model: &Model,
    batch: &Array2<f64>,
    beta: f64,
    ctx: &MinibatchContext,
    eps: &[Array2<f64>],
) -> Result<ObjectiveReport> {
    check_ctx(ctx, batch, model)?;
    let spec = ObjectiveSpec {
        decomposed: true,
        ..ObjectiveSpec::new(ObjectiveKind::Seatbelt, beta, model.config.free_bits)
    };
    evaluate(model, &spec, batch, eps)
}

#[cfg(test)]
mod tests;
