//! Closed-form probability primitives: diagonal Gaussians, reparameterised
//! sampling and the two likelihood families.
//!
//! Every function here has a value-level form operating on slices and a
//! tape-level form (suffix `_var`) operating on `[batch x dim]` nodes. The
//! two are kept independent so that each can check the other.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_dims, Error, Result};
use crate::tape::{sigmoid, softplus, Tape, Var};

pub const LOG_2PI: f64 = 1.837_877_066_409_345_5;

/// Encoder log-variances are clamped into this range.
pub const LOG_VAR_MIN: f64 = -12.0;
pub const LOG_VAR_MAX: f64 = 12.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagGaussian {
    pub mean: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mean: Vec<f64>, log_var: Vec<f64>) -> Result<Self> {
        if mean.is_empty() {
            return Err(Error::arg("DiagGaussian: dimension must be at least 1"));
        }
        ensure_dims("DiagGaussian", mean.len(), log_var.len())?;
        if mean.iter().chain(&log_var).any(|v| !v.is_finite()) {
            return Err(Error::arg("DiagGaussian: non-finite parameter"));
        }
        Ok(Self { mean, log_var })
    }

    /// Standard normal of dimension `dim`.
    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            log_var: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn clamped(mut self) -> Self {
        for v in &mut self.log_var {
            *v = v.clamp(LOG_VAR_MIN, LOG_VAR_MAX);
        }
        self
    }
}

/// `KL(p || q)` in nats.
pub fn kl_diag(p: &DiagGaussian, q: &DiagGaussian) -> Result<f64> {
    ensure_dims("kl_diag", p.dim(), q.dim())?;
    let mut kl = 0.0;
    for j in 0..p.dim() {
        let (mp, lp, mq, lq) = (p.mean[j], p.log_var[j], q.mean[j], q.log_var[j]);
        let d = mp - mq;
        kl += 0.5 * ((lp - lq).exp() + d * d * (-lq).exp() - 1.0 + lq - lp);
    }
    Ok(kl)
}

/// `mean + exp(log_var / 2) * eps`.
pub fn reparam_sample(d: &DiagGaussian, eps: &[f64]) -> Result<Vec<f64>> {
    ensure_dims("reparam_sample", d.dim(), eps.len())?;
    Ok(d.mean
        .iter()
        .zip(&d.log_var)
        .zip(eps)
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect())
}

pub fn log_prob_diag(d: &DiagGaussian, z: &[f64]) -> Result<f64> {
    ensure_dims("log_prob_diag", d.dim(), z.len())?;
    Ok(d.mean
        .iter()
        .zip(&d.log_var)
        .zip(z)
        .map(|((m, lv), z)| {
            let r = z - m;
            -0.5 * (LOG_2PI + lv + r * r * (-lv).exp())
        })
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LikelihoodFamily {
    BernoulliLogits,
    GaussianFixedVariance,
}

impl std::str::FromStr for LikelihoodFamily {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bernoulli-logits" | "bernoulli" => Ok(Self::BernoulliLogits),
            "gaussian-fixed-variance" | "gaussian" => Ok(Self::GaussianFixedVariance),
            other => Err(Error::config("likelihood", format!("unknown family `{other}`"))),
        }
    }
}

/// Parameters of `p(x | z)` for one data vector.
#[derive(Debug, Clone, PartialEq)]
pub struct LikelihoodParams {
    pub family: LikelihoodFamily,
    /// Logits (Bernoulli) or means (Gaussian), one per data element.
    pub params: Vec<f64>,
    pub fixed_sigma: f64,
}

impl LikelihoodParams {
    /// Mean of the likelihood expressed in the `[-1, 1]` data range.
    pub fn data_mean(&self) -> Vec<f64> {
        match self.family {
            LikelihoodFamily::BernoulliLogits => {
                self.params.iter().map(|l| 2.0 * sigmoid(*l) - 1.0).collect()
            }
            LikelihoodFamily::GaussianFixedVariance => {
                self.params.iter().map(|m| m.clamp(-1.0, 1.0)).collect()
            }
        }
    }
}

pub(crate) fn check_data_range(x: &[f64]) -> Result<()> {
    match x.iter().position(|v| !(-1.0..=1.0).contains(v)) {
        Some(i) => Err(Error::arg(format!(
            "data element {i} = {} outside [-1, 1]",
            x[i]
        ))),
        None => Ok(()),
    }
}

/// `log p(x | params)`. Bernoulli targets are `(x + 1) / 2`.
pub fn log_likelihood(lp: &LikelihoodParams, x: &[f64]) -> Result<f64> {
    ensure_dims("log_likelihood", lp.params.len(), x.len())?;
    check_data_range(x)?;
    Ok(match lp.family {
        LikelihoodFamily::BernoulliLogits => lp
            .params
            .iter()
            .zip(x)
            .map(|(l, x)| 0.5 * (x + 1.0) * l - softplus(*l))
            .sum(),
        LikelihoodFamily::GaussianFixedVariance => {
            let s2 = lp.fixed_sigma * lp.fixed_sigma;
            let norm = LOG_2PI + s2.ln();
            lp.params
                .iter()
                .zip(x)
                .map(|(m, x)| -0.5 * (norm + (x - m) * (x - m) / s2))
                .sum()
        }
    })
}

/// Per-element `KL(p || q)` as a `[batch x dim]` node.
pub fn kl_diag_var(t: &mut Tape, p_mu: Var, p_lv: Var, q_mu: Var, q_lv: Var) -> Var {
    // exp(lp - lq) rather than exp(lp) * exp(-lq) keeps KL(p || p) exactly 0
    let lr = t.sub(p_lv, q_lv);
    let var_ratio = t.exp(lr);
    let d = t.sub(p_mu, q_mu);
    let d2 = t.square(d);
    let neg_q = t.scale(q_lv, -1.0);
    let prec_q = t.exp(neg_q);
    let mahal = t.mul(d2, prec_q);
    let s = t.add(var_ratio, mahal);
    let s = t.sub(s, lr);
    let s = t.offset(s, -1.0);
    t.scale(s, 0.5)
}

/// `mu + exp(lv / 2) * eps` with `eps` a constant node.
pub fn reparam_var(t: &mut Tape, mu: Var, lv: Var, eps: Var) -> Var {
    let half = t.scale(lv, 0.5);
    let sd = t.exp(half);
    let noise = t.mul(sd, eps);
    t.add(mu, noise)
}

/// Elementwise standard-normal log density.
pub fn std_normal_log_density_var(t: &mut Tape, z: Var) -> Var {
    let z2 = t.square(z);
    let s = t.scale(z2, -0.5);
    t.offset(s, -0.5 * LOG_2PI)
}

/// Per-row log-likelihood, `[batch x 1]`. `x` holds data in `[-1, 1]`.
pub fn log_likelihood_var(
    t: &mut Tape,
    family: LikelihoodFamily,
    fixed_sigma: f64,
    params: Var,
    x: Var,
) -> Var {
    match family {
        LikelihoodFamily::BernoulliLogits => {
            let targets = t.value(x).mapv(|v| 0.5 * (v + 1.0));
            let targets = t.constant(targets);
            let tl = t.mul(targets, params);
            let sp = t.softplus(params);
            let per = t.sub(tl, sp);
            t.row_sums(per)
        }
        LikelihoodFamily::GaussianFixedVariance => {
            let s2 = fixed_sigma * fixed_sigma;
            let r = t.sub(x, params);
            let r2 = t.square(r);
            let per = t.scale(r2, -0.5 / s2);
            let per = t.offset(per, -0.5 * (LOG_2PI + s2.ln()));
            t.row_sums(per)
        }
    }
}

/// Likelihood mean mapped into the `[-1, 1]` data range, differentiable.
pub fn data_mean_var(t: &mut Tape, family: LikelihoodFamily, params: Var) -> Var {
    match family {
        // 2 sigmoid(l) - 1 = tanh(l / 2)
        LikelihoodFamily::BernoulliLogits => {
            let h = t.scale(params, 0.5);
            t.tanh(h)
        }
        LikelihoodFamily::GaussianFixedVariance => t.clamp(params, -1.0, 1.0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gauss(mean: &[f64], log_var: &[f64]) -> DiagGaussian {
        DiagGaussian::new(mean.to_vec(), log_var.to_vec()).unwrap()
    }

    /// Composite Simpson rule on `[a, b]`.
    fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let n = n + n % 2;
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * f(a + i as f64 * h);
        }
        s * h / 3.0
    }

    fn density_1d(m: f64, lv: f64, x: f64) -> f64 {
        let v = lv.exp();
        (-(x - m) * (x - m) / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt()
    }

    #[test]
    fn kl_identity_and_unit_shift() {
        let p = DiagGaussian::standard(2);
        assert_eq!(kl_diag(&p, &p).unwrap(), 0.0);
        let kl = kl_diag(&gauss(&[0.0], &[0.0]), &gauss(&[1.0], &[0.0])).unwrap();
        assert!((kl - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kl_matches_quadrature() {
        let p = gauss(&[0.3, -1.1, 0.7], &[-0.4, 0.5, 0.1]);
        let q = gauss(&[-0.2, 0.4, 1.3], &[0.2, -0.3, 0.6]);
        // diagonal Gaussians factorise, so the KL is a sum of 1-D integrals
        let mut quad = 0.0;
        for j in 0..3 {
            let (mp, lp, mq, lq) = (p.mean[j], p.log_var[j], q.mean[j], q.log_var[j]);
            let sd = (0.5 * lp).exp();
            quad += simpson(
                |x| {
                    let pp = density_1d(mp, lp, x);
                    if pp <= 0.0 {
                        0.0
                    } else {
                        pp * (pp.ln() - density_1d(mq, lq, x).ln())
                    }
                },
                mp - 14.0 * sd,
                mp + 14.0 * sd,
                20_000,
            );
        }
        let kl = kl_diag(&p, &q).unwrap();
        assert!(((kl - quad) / quad).abs() < 1e-6, "{kl} vs {quad}");
    }

    #[test]
    fn kl_rejects_dimension_mismatch() {
        let err = kl_diag(&DiagGaussian::standard(2), &DiagGaussian::standard(3));
        assert!(matches!(err, Err(Error::Argument(_))));
    }

    #[test]
    fn reparam_examples() {
        let d = gauss(&[0.5, -2.0], &[0.3, 0.0]);
        assert_eq!(reparam_sample(&d, &[0.0, 0.0]).unwrap(), d.mean);
        let u = gauss(&[0.5, -2.0], &[0.0, 0.0]);
        assert_eq!(reparam_sample(&u, &[1.0, 1.0]).unwrap(), vec![1.5, -1.0]);
        assert!(reparam_sample(&d, &[0.0]).is_err());
    }

    #[test]
    fn reparam_moments_within_three_standard_errors() {
        let d = gauss(&[0.7, -1.5], &[0.4, -1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let mut sum = [0.0; 2];
        let mut sum2 = [0.0; 2];
        for _ in 0..n {
            let eps: Vec<f64> = (0..2).map(|_| rng.sample(StandardNormal)).collect();
            let z = reparam_sample(&d, &eps).unwrap();
            for j in 0..2 {
                sum[j] += z[j];
                sum2[j] += z[j] * z[j];
            }
        }
        for j in 0..2 {
            let var = d.log_var[j].exp();
            let mean = sum[j] / n as f64;
            let sample_var = sum2[j] / n as f64 - mean * mean;
            let se_mean = (var / n as f64).sqrt();
            let se_var = var * (2.0 / (n - 1) as f64).sqrt();
            assert!((mean - d.mean[j]).abs() < 3.0 * se_mean);
            assert!((sample_var - var).abs() < 3.0 * se_var);
        }
    }

    #[test]
    fn log_prob_examples() {
        let lp = log_prob_diag(&DiagGaussian::standard(1), &[0.0]).unwrap();
        assert!((lp + 0.5 * LOG_2PI).abs() < 1e-15);
        let shifted = log_prob_diag(&gauss(&[1.3], &[0.6]), &[1.3 + 0.4]).unwrap();
        let centred = log_prob_diag(&gauss(&[0.0], &[0.6]), &[0.4]).unwrap();
        assert!((shifted - centred).abs() < 1e-14);
    }

    #[test]
    fn log_prob_matches_per_dimension_product() {
        let d = gauss(&[0.1, -0.3, 0.9, 2.0], &[0.2, -0.7, 1.1, 0.0]);
        let z = [0.5, 0.1, -0.2, 2.5];
        let product: f64 = (0..4)
            .map(|j| density_1d(d.mean[j], d.log_var[j], z[j]))
            .product();
        let lp = log_prob_diag(&d, &z).unwrap();
        assert!((lp - product.ln()).abs() < 1e-10);
    }

    #[test]
    fn likelihood_examples() {
        let x = [0.3, -1.0, 1.0, 0.0, 0.5];
        let b = LikelihoodParams {
            family: LikelihoodFamily::BernoulliLogits,
            params: vec![0.0; 5],
            fixed_sigma: 1.0,
        };
        assert!((log_likelihood(&b, &x).unwrap() + 5.0 * 2f64.ln()).abs() < 1e-12);
        let g = LikelihoodParams {
            family: LikelihoodFamily::GaussianFixedVariance,
            params: x.to_vec(),
            fixed_sigma: 1.0,
        };
        assert!((log_likelihood(&g, &x).unwrap() + 2.5 * LOG_2PI).abs() < 1e-12);
        assert!(log_likelihood(&g, &[0.3, -1.0, 1.0, 0.0, 1.5]).is_err());
    }

    #[test]
    fn bernoulli_matches_naive_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logits: Vec<f64> = (0..64).map(|_| rng.random_range(-4.0..4.0)).collect();
        let x: Vec<f64> = (0..64)
            .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
            .collect();
        let naive: f64 = logits
            .iter()
            .zip(&x)
            .map(|(l, x)| {
                let p = 1.0 / (1.0 + (-l).exp());
                if *x > 0.0 {
                    p.ln()
                } else {
                    (1.0 - p).ln()
                }
            })
            .sum();
        let lp = LikelihoodParams {
            family: LikelihoodFamily::BernoulliLogits,
            params: logits,
            fixed_sigma: 1.0,
        };
        assert!((log_likelihood(&lp, &x).unwrap() - naive).abs() < 1e-10);
    }

    fn row(v: &[f64]) -> Array2<f64> {
        Array2::from_shape_vec((1, v.len()), v.to_vec()).unwrap()
    }

    /// Central differences of a value-level function vs the tape gradient.
    fn check_grad(
        inputs: &[Vec<f64>],
        value_fn: impl Fn(&[Vec<f64>]) -> f64,
        tape_fn: impl Fn(&mut Tape, &[Var]) -> Var,
    ) {
        let mut t = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|v| t.param(row(v))).collect();
        let out = tape_fn(&mut t, &vars);
        assert!((t.scalar(out) - value_fn(inputs)).abs() < 1e-10);
        let g = t.backward(out);
        let h = 1e-5;
        for (i, input) in inputs.iter().enumerate() {
            for j in 0..input.len() {
                let mut plus = inputs.to_vec();
                plus[i][j] += h;
                let mut minus = inputs.to_vec();
                minus[i][j] -= h;
                let numeric = (value_fn(&plus) - value_fn(&minus)) / (2.0 * h);
                let analytic = g.get(vars[i]).map_or(0.0, |a| a[[0, j]]);
                let scale = numeric.abs().max(analytic.abs()).max(1e-3);
                assert!(
                    (numeric - analytic).abs() / scale < 1e-4,
                    "input {i}[{j}]: {analytic} vs {numeric}"
                );
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let pm = vec![0.3, -0.2, 0.8];
        let pl = vec![0.1, -0.4, 0.3];
        let qm = vec![-0.5, 0.6, 0.2];
        let ql = vec![0.2, 0.5, -0.3];
        check_grad(
            &[pm.clone(), pl.clone(), qm.clone(), ql.clone()],
            |v| kl_diag(&gauss(&v[0], &v[1]), &gauss(&v[2], &v[3])).unwrap(),
            |t, v| {
                let k = kl_diag_var(t, v[0], v[1], v[2], v[3]);
                t.sum(k)
            },
        );
        let eps = vec![0.4, -1.3, 0.9];
        let w = [0.7, -0.2, 1.5];
        check_grad(
            &[pm.clone(), pl.clone()],
            |v| {
                let z = reparam_sample(&gauss(&v[0], &v[1]), &eps).unwrap();
                z.iter().zip(&w).map(|(a, b)| a * b).sum()
            },
            |t, v| {
                let e = t.constant(row(&eps));
                let z = reparam_var(t, v[0], v[1], e);
                let wv = t.constant(row(&w));
                let p = t.mul(z, wv);
                t.sum(p)
            },
        );
        check_grad(
            &[pm.clone(), pl.clone(), qm.clone()],
            |v| log_prob_diag(&gauss(&v[0], &v[1]), &v[2]).unwrap(),
            |t, v| {
                let l = t.gauss_log_density(v[2], v[0], v[1]);
                t.sum(l)
            },
        );
        let x = vec![1.0, -1.0, 0.25];
        for family in [
            LikelihoodFamily::BernoulliLogits,
            LikelihoodFamily::GaussianFixedVariance,
        ] {
            check_grad(
                &[qm.clone()],
                |v| {
                    log_likelihood(
                        &LikelihoodParams {
                            family,
                            params: v[0].clone(),
                            fixed_sigma: 0.7,
                        },
                        &x,
                    )
                    .unwrap()
                },
                |t, v| {
                    let xv = t.constant(row(&x));
                    let l = log_likelihood_var(t, family, 0.7, v[0], xv);
                    t.sum(l)
                },
            );
        }
    }

    proptest! {
        #[test]
        fn kl_is_non_negative(
            pm in proptest::collection::vec(-3.0f64..3.0, 4),
            pl in proptest::collection::vec(-4.0f64..4.0, 4),
            qm in proptest::collection::vec(-3.0f64..3.0, 4),
            ql in proptest::collection::vec(-4.0f64..4.0, 4),
        ) {
            let p = gauss(&pm, &pl);
            let q = gauss(&qm, &ql);
            prop_assert!(kl_diag(&p, &q).unwrap() >= -1e-12);
            prop_assert_eq!(kl_diag(&p, &p).unwrap(), 0.0);
        }
    }
}
