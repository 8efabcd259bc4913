//! Minibatch weighted sampling estimates of `log q(z)` for an aggregate
//! posterior, given one sample per minibatch member.

use crate::distributions::{DiagGaussian, LOG_2PI};
use crate::error::{Error, Result};
use crate::tape::log_sum_exp;

/// Batch size `M` and dataset size `N` for one minibatch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MinibatchContext {
    batch_size: usize,
    dataset_size: usize,
}

impl MinibatchContext {
    pub fn new(batch_size: usize, dataset_size: usize) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::arg("minibatch size must be positive"));
        }
        if batch_size > dataset_size {
            return Err(Error::arg(format!(
                "minibatch size {batch_size} exceeds dataset size {dataset_size}"
            )));
        }
        Ok(Self {
            batch_size,
            dataset_size,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn dataset_size(&self) -> usize {
        self.dataset_size
    }

    pub fn log_nm(&self) -> f64 {
        ((self.batch_size * self.dataset_size) as f64).ln()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MwsEstimate {
    /// `log sum_j q(z_k | j) - log(N M)` per sample `k`.
    pub joint: Vec<f64>,
    /// `log sum_j q(z_kd | j) - log(N M)` per sample `k` and coordinate `d`.
    pub per_dim: Vec<Vec<f64>>,
}

impl MwsEstimate {
    /// Mean over samples of `joint - sum_d per_dim`, the total-correlation
    /// estimate.
    pub fn total_correlation(&self) -> f64 {
        let m = self.joint.len() as f64;
        self.joint
            .iter()
            .zip(&self.per_dim)
            .map(|(j, p)| j - p.iter().sum::<f64>())
            .sum::<f64>()
            / m
    }
}

pub fn mws_log_q_aggregate(
    z_samples: &[Vec<f64>],
    conditionals: &[DiagGaussian],
    ctx: &MinibatchContext,
) -> Result<MwsEstimate> {
    let m = z_samples.len();
    if m == 0 {
        return Err(Error::arg("mws: empty minibatch"));
    }
    if conditionals.len() != m || m != ctx.batch_size() {
        return Err(Error::arg(format!(
            "mws: {m} samples, {} conditionals, context batch size {}",
            conditionals.len(),
            ctx.batch_size()
        )));
    }
    let dim = conditionals[0].dim();
    if z_samples.iter().any(|z| z.len() != dim) || conditionals.iter().any(|c| c.dim() != dim) {
        return Err(Error::arg("mws: inconsistent latent dimensions"));
    }
    let log_nm = ctx.log_nm();
    let mut joint = Vec::with_capacity(m);
    let mut per_dim = Vec::with_capacity(m);
    let mut dens = vec![vec![0.0; dim]; m];
    for z in z_samples {
        for (j, c) in conditionals.iter().enumerate() {
            for d in 0..dim {
                let r = z[d] - c.mean[d];
                dens[j][d] = -0.5 * (LOG_2PI + c.log_var[d] + r * r * (-c.log_var[d]).exp());
            }
        }
        let row_sums: Vec<f64> = dens.iter().map(|r| r.iter().sum()).collect();
        joint.push(log_sum_exp(row_sums) - log_nm);
        per_dim.push(
            (0..dim)
                .map(|d| log_sum_exp(dens.iter().map(|r| r[d]).collect::<Vec<_>>()) - log_nm)
                .collect(),
        );
    }
    Ok(MwsEstimate { joint, per_dim })
}
