//! Model families sharing one parameterisation: a single-layer VAE (trained
//! either with the plain or the total-correlation objective) and the
//! hierarchical Seatbelt model whose likelihood conditions on every latent
//! layer.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distributions::{
    self, data_mean_var, log_likelihood, log_prob_diag, std_normal_log_density_var, DiagGaussian,
    LikelihoodFamily, LikelihoodParams, LOG_2PI,
};
use crate::error::{ensure_dims, Error, Result};
use crate::netcore::{gaussian_head, gaussian_rows, GaussianVars, Graph, Mlp, MlpSpec, ParamStore};
use crate::tape::Var;

fn default_fixed_sigma() -> f64 {
    1.0
}

fn default_slope() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Latent widths `|z^1|, ..., |z^L|`, non-increasing.
    pub z_dims: Vec<usize>,
    pub beta: f64,
    pub likelihood: LikelihoodFamily,
    #[serde(default = "default_fixed_sigma")]
    pub fixed_sigma: f64,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    /// Hidden width of the link networks between layer `i` and `i + 1`,
    /// indexed by `i`; each link MLP has two hidden layers of this width.
    pub link_hidden: Vec<usize>,
    #[serde(default = "default_slope")]
    pub leaky_slope: f64,
    #[serde(default)]
    pub batch_norm: bool,
    /// Free-bits floor in nats per latent dimension.
    pub free_bits: f64,
    pub data_dim: usize,
    pub dataset_size: usize,
    /// Restrict the decoder to `z^1` (chain-factorised generative model).
    #[serde(default)]
    pub dlgm: bool,
}

impl ModelConfig {
    /// Desk-scale single-layer configuration for 32x32 images.
    pub fn single_layer(z_dim: usize, beta: f64, dataset_size: usize) -> Self {
        Self {
            z_dims: vec![z_dim],
            beta,
            likelihood: LikelihoodFamily::BernoulliLogits,
            fixed_sigma: 1.0,
            encoder_hidden: vec![256, 128],
            decoder_hidden: vec![128, 256],
            link_hidden: default_link_hidden(),
            leaky_slope: 0.2,
            batch_norm: false,
            free_bits: 0.125,
            data_dim: 32 * 32,
            dataset_size,
            dlgm: false,
        }
    }

    /// Desk-scale Seatbelt configuration with `layers` stochastic layers.
    pub fn seatbelt(layers: usize, beta: f64, dataset_size: usize) -> Self {
        Self {
            z_dims: default_z_dims(layers),
            ..Self::single_layer(8, beta, dataset_size)
        }
    }

    pub fn layers(&self) -> usize {
        self.z_dims.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.z_dims.is_empty() || self.z_dims.contains(&0) {
            return Err(Error::config("z_dims", "need at least one positive width"));
        }
        if self.z_dims.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::config("z_dims", "widths must be non-increasing"));
        }
        if !(self.beta >= 1.0) {
            return Err(Error::config("beta", "must be >= 1"));
        }
        if !(self.free_bits >= 0.0) {
            return Err(Error::config("free_bits", "must be >= 0"));
        }
        if self.data_dim == 0 {
            return Err(Error::config("data_dim", "must be positive"));
        }
        if self.dataset_size == 0 {
            return Err(Error::config("dataset_size", "must be positive"));
        }
        if self.encoder_hidden.is_empty() || self.decoder_hidden.is_empty() {
            return Err(Error::config("encoder_hidden", "encoder and decoder need hidden layers"));
        }
        if self.layers() > 1 && self.link_hidden.len() < self.layers() - 1 {
            return Err(Error::config(
                "link_hidden",
                format!("need {} entries for {} layers", self.layers() - 1, self.layers()),
            ));
        }
        if !(self.fixed_sigma > 0.0) {
            return Err(Error::config("fixed_sigma", "must be positive"));
        }
        Ok(())
    }

    /// Width of the decoder input: `|z^1|` for the chain model, the sum of
    /// all layer widths otherwise.
    pub fn decoder_input_dim(&self) -> usize {
        if self.dlgm {
            self.z_dims[0]
        } else {
            self.z_dims.iter().sum()
        }
    }
}

/// Tail of the `{96, 48, 24, 12, 6}` width list.
pub fn default_z_dims(layers: usize) -> Vec<usize> {
    let all = [96, 48, 24, 12, 6];
    let layers = layers.clamp(1, all.len());
    all[all.len() - layers..].to_vec()
}

pub fn default_link_hidden() -> Vec<usize> {
    vec![64, 32, 16, 8]
}

/// Per-layer posteriors and reparameterised samples for one datapoint.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentChain {
    pub posteriors: Vec<DiagGaussian>,
    pub samples: Vec<Vec<f64>>,
}

/// Tape nodes for one layer of the inference chain.
#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub posterior: GaussianVars,
    pub sample: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    encoder: Mlp,
    /// `q(z^{i+1} | z^i)`, one per link.
    q_links: Vec<Mlp>,
    /// `p(z^i | z^{i+1})`, one per link.
    p_links: Vec<Mlp>,
    decoder: Mlp,
}

fn mlp_spec(config: &ModelConfig, in_dim: usize, hidden: Vec<usize>, out_dim: usize) -> MlpSpec {
    MlpSpec {
        leaky_slope: config.leaky_slope,
        batch_norm: config.batch_norm,
        ..MlpSpec::new(in_dim, hidden, out_dim)
    }
}

pub(crate) fn row_matrix(x: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("row")
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let z = &config.z_dims;
        let encoder = Mlp::build(
            mlp_spec(&config, config.data_dim, config.encoder_hidden.clone(), 2 * z[0]),
            "enc",
            &mut params,
            &mut rng,
        )?;
        let mut q_links = Vec::new();
        for i in 0..z.len() - 1 {
            let h = config.link_hidden[i];
            q_links.push(Mlp::build(
                mlp_spec(&config, z[i], vec![h, h], 2 * z[i + 1]),
                &format!("q{}", i + 1),
                &mut params,
                &mut rng,
            )?);
        }
        let mut p_links = Vec::new();
        for i in 0..z.len() - 1 {
            let h = config.link_hidden[i];
            p_links.push(Mlp::build(
                mlp_spec(&config, z[i + 1], vec![h, h], 2 * z[i]),
                &format!("p{}", i + 1),
                &mut params,
                &mut rng,
            )?);
        }
        let decoder = Mlp::build(
            mlp_spec(
                &config,
                config.decoder_input_dim(),
                config.decoder_hidden.clone(),
                config.data_dim,
            ),
            "dec",
            &mut params,
            &mut rng,
        )?;
        params.round_to_f32();
        Ok(Self {
            config,
            params,
            encoder,
            q_links,
            p_links,
            decoder,
        })
    }

    pub fn layers(&self) -> usize {
        self.config.layers()
    }

    pub fn decoder_spec(&self) -> &MlpSpec {
        &self.decoder.spec
    }

    /// Whether a parameter belongs to the inference side (`q_phi`).
    pub fn is_encoder_param(name: &str) -> bool {
        name.starts_with("enc.") || name.starts_with('q')
    }

    pub fn graph(&self, grad: bool, train: bool) -> Graph {
        Graph::new(&self.params, grad, train)
    }

    fn check_batch(&self, x: &Array2<f64>) -> Result<()> {
        ensure_dims("data width", x.ncols(), self.config.data_dim)?;
        if x.nrows() == 0 {
            return Err(Error::arg("empty batch"));
        }
        Ok(())
    }

    /// `q(z^1 | x)` on the tape.
    pub fn encode_vars(&self, g: &mut Graph, x: Var) -> Result<GaussianVars> {
        let h = self.encoder.forward(g, x)?;
        gaussian_head(&mut g.tape, h)
    }

    /// `q(z^{i+1} | z^i)` on the tape; `link` is `i - 1`.
    pub fn q_link_vars(&self, g: &mut Graph, link: usize, z: Var) -> Result<GaussianVars> {
        let h = self.q_links[link].forward(g, z)?;
        gaussian_head(&mut g.tape, h)
    }

    /// `p(z^i | z^{i+1})` on the tape; `link` is `i - 1`.
    pub fn p_link_vars(&self, g: &mut Graph, link: usize, z_above: Var) -> Result<GaussianVars> {
        let h = self.p_links[link].forward(g, z_above)?;
        gaussian_head(&mut g.tape, h)
    }

    /// Runs the inference chain. With `eps = None` every layer takes its
    /// conditional mean, giving the deterministic mean chain.
    pub fn chain_vars(
        &self,
        g: &mut Graph,
        x: Var,
        eps: Option<&[Array2<f64>]>,
    ) -> Result<Vec<LayerVars>> {
        let n_layers = self.layers();
        if let Some(eps) = eps {
            if eps.len() != n_layers {
                return Err(Error::arg(format!(
                    "infer_chain: {} noise arrays for {n_layers} layers",
                    eps.len()
                )));
            }
            let rows = g.tape.shape(x).0;
            for (i, e) in eps.iter().enumerate() {
                if e.dim() != (rows, self.config.z_dims[i]) {
                    return Err(Error::arg(format!(
                        "infer_chain: noise for layer {} has shape {:?}, expected {:?}",
                        i + 1,
                        e.dim(),
                        (rows, self.config.z_dims[i])
                    )));
                }
            }
        }
        let mut layers = Vec::with_capacity(n_layers);
        let mut input = x;
        for i in 0..n_layers {
            let posterior = if i == 0 {
                self.encode_vars(g, input)?
            } else {
                self.q_link_vars(g, i - 1, input)?
            };
            let sample = match eps {
                Some(eps) => {
                    let e = g.tape.constant(eps[i].clone());
                    distributions::reparam_var(&mut g.tape, posterior.mean, posterior.log_var, e)
                }
                None => posterior.mean,
            };
            if g.tape.value(sample).iter().any(|v| !v.is_finite()) {
                return Err(Error::numeric(format!("z{}", i + 1)));
            }
            layers.push(LayerVars { posterior, sample });
            input = sample;
        }
        Ok(layers)
    }

    /// Decoder output (logits or means) from the layer samples.
    pub fn decode_vars(&self, g: &mut Graph, samples: &[Var]) -> Result<Var> {
        if samples.len() != self.layers() {
            return Err(Error::arg("decode: one sample per layer required"));
        }
        let input = if self.config.dlgm {
            samples[0]
        } else {
            g.tape.concat_cols(samples)
        };
        self.decoder.forward(g, input)
    }

    /// Per-row `log p(x | z)`, `[batch x 1]`.
    pub fn log_likelihood_rows(&self, g: &mut Graph, x: Var, samples: &[Var]) -> Result<Var> {
        let params = self.decode_vars(g, samples)?;
        Ok(distributions::log_likelihood_var(
            &mut g.tape,
            self.config.likelihood,
            self.config.fixed_sigma,
            params,
            x,
        ))
    }

    /// Elementwise prior log densities per layer: `log p(z^i | z^{i+1})` for
    /// lower layers, `log N(z^L; 0, I)` for the top.
    pub fn prior_log_density_vars(&self, g: &mut Graph, samples: &[Var]) -> Result<Vec<Var>> {
        let n = self.layers();
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let lp = if i + 1 == n {
                std_normal_log_density_var(&mut g.tape, samples[i])
            } else {
                let prior = self.p_link_vars(g, i, samples[i + 1])?;
                g.tape
                    .gauss_log_density(samples[i], prior.mean, prior.log_var)
            };
            out.push(lp);
        }
        Ok(out)
    }

    /// Differentiable reconstruction in the data range along the mean chain.
    pub fn reconstruct_vars(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let chain = self.chain_vars(g, x, None)?;
        let samples: Vec<Var> = chain.iter().map(|l| l.sample).collect();
        let params = self.decode_vars(g, &samples)?;
        Ok(data_mean_var(&mut g.tape, self.config.likelihood, params))
    }

    /// `q(z^1 | x)`.
    pub fn encode(&self, x: &[f64]) -> Result<DiagGaussian> {
        Ok(self.encode_batch(&row_matrix(x))?.remove(0))
    }

    pub fn encode_batch(&self, x: &Array2<f64>) -> Result<Vec<DiagGaussian>> {
        self.check_batch(x)?;
        let mut g = self.graph(false, false);
        let xv = g.tape.constant(x.clone());
        let q = self.encode_vars(&mut g, xv)?;
        Ok(gaussian_rows(&g.tape, q))
    }

    /// Samples the inference chain for one datapoint with explicit noise.
    pub fn infer_chain(&self, x: &[f64], eps: &[Vec<f64>]) -> Result<LatentChain> {
        ensure_dims("data width", x.len(), self.config.data_dim)?;
        let eps: Vec<Array2<f64>> = eps.iter().map(|e| row_matrix(e)).collect();
        let mut g = self.graph(false, false);
        let xv = g.tape.constant(row_matrix(x));
        let layers = self.chain_vars(&mut g, xv, Some(&eps))?;
        Ok(LatentChain {
            posteriors: layers
                .iter()
                .map(|l| gaussian_rows(&g.tape, l.posterior).remove(0))
                .collect(),
            samples: layers
                .iter()
                .map(|l| g.tape.value(l.sample).row(0).to_vec())
                .collect(),
        })
    }

    /// Per-layer posteriors along the mean chain (`eps = 0`).
    pub fn mean_chain(&self, x: &[f64]) -> Result<Vec<DiagGaussian>> {
        let zeros: Vec<Vec<f64>> = self.config.z_dims.iter().map(|d| vec![0.0; *d]).collect();
        Ok(self.infer_chain(x, &zeros)?.posteriors)
    }

    /// Likelihood parameters `p(x | z^1..z^L)` for given layer samples.
    pub fn likelihood_params(&self, samples: &[Vec<f64>]) -> Result<LikelihoodParams> {
        if samples.len() != self.layers() {
            return Err(Error::arg("likelihood_params: one sample per layer required"));
        }
        let mut g = self.graph(false, false);
        let mut vars = Vec::with_capacity(samples.len());
        for (s, d) in samples.iter().zip(&self.config.z_dims) {
            ensure_dims("latent sample", s.len(), *d)?;
            vars.push(g.tape.constant(row_matrix(s)));
        }
        let out = self.decode_vars(&mut g, &vars)?;
        Ok(LikelihoodParams {
            family: self.config.likelihood,
            params: g.tape.value(out).row(0).to_vec(),
            fixed_sigma: self.config.fixed_sigma,
        })
    }

    /// `log p(x | z) + sum_i log p(z^i | z^{i+1}) + log p(z^L)`.
    pub fn generative_logjoint(&self, x: &[f64], chain: &LatentChain) -> Result<f64> {
        ensure_dims("data width", x.len(), self.config.data_dim)?;
        let lp = self.likelihood_params(&chain.samples)?;
        let mut total = log_likelihood(&lp, x)?;
        let n = self.layers();
        for i in 0..n {
            total += if i + 1 == n {
                log_prob_diag(&DiagGaussian::standard(self.config.z_dims[i]), &chain.samples[i])?
            } else {
                log_prob_diag(&self.prior_link(i, &chain.samples[i + 1])?, &chain.samples[i])?
            };
        }
        Ok(total)
    }

    /// `p(z^i | z^{i+1})` parameters for `link = i - 1`.
    pub fn prior_link(&self, link: usize, z_above: &[f64]) -> Result<DiagGaussian> {
        if link + 1 >= self.layers() {
            return Err(Error::arg(format!("no prior link {link}")));
        }
        ensure_dims("latent sample", z_above.len(), self.config.z_dims[link + 1])?;
        let mut g = self.graph(false, false);
        let z = g.tape.constant(row_matrix(z_above));
        let p = self.p_link_vars(&mut g, link, z)?;
        Ok(gaussian_rows(&g.tape, p).remove(0))
    }

    /// Likelihood mean decoded from the mean chain, in `[-1, 1]`.
    pub fn reconstruct(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.reconstruct_batch(&row_matrix(x))?.row(0).to_vec())
    }

    pub fn reconstruct_batch(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_batch(x)?;
        let mut g = self.graph(false, false);
        let xv = g.tape.constant(x.clone());
        let out = self.reconstruct_vars(&mut g, xv)?;
        Ok(g.tape.value(out).clone())
    }

    /// Log of the standard-normal density at the origin for `dim` units.
    pub fn prior_log_density_at_origin(dim: usize) -> f64 {
        -0.5 * dim as f64 * LOG_2PI
    }
}
