//! Parametric building blocks: named parameter storage, multilayer
//! perceptrons and the Gaussian output head.

use std::collections::HashMap;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::distributions::{DiagGaussian, LOG_VAR_MAX, LOG_VAR_MIN};
use crate::error::{Error, Result};
use crate::tape::{Grads, Tape, Var};

pub const BATCH_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    #[default]
    LeakyRelu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub in_dim: usize,
    pub hidden: Vec<usize>,
    pub out_dim: usize,
    #[serde(default)]
    pub activation: Activation,
    pub leaky_slope: f64,
    /// Batch normalisation before each hidden activation.
    pub batch_norm: bool,
}

impl MlpSpec {
    pub fn new(in_dim: usize, hidden: Vec<usize>, out_dim: usize) -> Self {
        Self {
            in_dim,
            hidden,
            out_dim,
            activation: Activation::LeakyRelu,
            leaky_slope: 0.2,
            batch_norm: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_dim == 0 || self.out_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::arg("MlpSpec: widths must be positive"));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::arg("MlpSpec: leaky_slope must lie in (0, 1)"));
        }
        Ok(())
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden.len() + 2);
        w.push(self.in_dim);
        w.extend(&self.hidden);
        w.push(self.out_dim);
        w
    }

    /// Trainable parameter count: weights and biases of every affine layer,
    /// plus scale and shift per hidden unit when batch norm is enabled.
    pub fn param_count(&self) -> usize {
        let w = self.widths();
        let affine: usize = w.windows(2).map(|p| p[0] * p[1] + p[1]).sum();
        let bn: usize = if self.batch_norm {
            self.hidden.iter().map(|h| 2 * h).sum()
        } else {
            0
        };
        affine + bn
    }
}

/// Named parameter arrays in creation order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    arrays: Vec<Array2<f64>>,
    trainable: Vec<bool>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Array2<f64>, trainable: bool) -> Result<usize> {
        if self.index.contains_key(name) {
            return Err(Error::arg(format!("duplicate parameter name `{name}`")));
        }
        self.names.push(name.to_string());
        self.arrays.push(value);
        self.trainable.push(trainable);
        self.index.insert(name.to_string(), self.names.len() - 1);
        Ok(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: usize) -> &Array2<f64> {
        &self.arrays[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Array2<f64> {
        &mut self.arrays[id]
    }

    pub fn by_name(&self, name: &str) -> Option<&Array2<f64>> {
        self.id(name).map(|i| &self.arrays[i])
    }

    pub fn is_trainable(&self, id: usize) -> bool {
        self.trainable[id]
    }

    pub fn shape(&self, id: usize) -> (usize, usize) {
        self.arrays[id].dim()
    }

    /// Count of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.arrays
            .iter()
            .zip(&self.trainable)
            .filter(|(_, t)| **t)
            .map(|(a, _)| a.len())
            .sum()
    }

    /// Count of every stored scalar, buffers included.
    pub fn num_scalars(&self) -> usize {
        self.arrays.iter().map(|a| a.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>, bool)> {
        self.names
            .iter()
            .zip(&self.arrays)
            .zip(&self.trainable)
            .map(|((n, a), t)| (n.as_str(), a, *t))
    }

    /// All scalars in creation order, row-major within each array.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for a in &self.arrays {
            out.extend(a.iter());
        }
        out
    }

    /// Rounds every stored scalar to the nearest 32-bit float, the precision
    /// at which checkpoints are persisted.
    pub fn round_to_f32(&mut self) {
        for a in &mut self.arrays {
            a.mapv_inplace(|v| v as f32 as f64);
        }
    }

    /// Inverse of [`ParamStore::flatten`].
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_scalars() {
            return Err(Error::arg(format!(
                "assign_flat: expected {} values, got {}",
                self.num_scalars(),
                flat.len()
            )));
        }
        let mut off = 0;
        for a in &mut self.arrays {
            let n = a.len();
            for (dst, src) in a.iter_mut().zip(&flat[off..off + n]) {
                *dst = *src;
            }
            off += n;
        }
        Ok(())
    }
}

/// Pending update of batch-norm running statistics recorded in train mode.
#[derive(Debug, Clone)]
pub struct BnUpdate {
    pub mean_id: usize,
    pub var_id: usize,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
}

/// A tape bound to a parameter store for one forward/backward pass.
pub struct Graph {
    pub tape: Tape,
    params: Vec<Var>,
    train: bool,
    bn_updates: Vec<BnUpdate>,
}

impl Graph {
    /// Binds every parameter as a leaf. With `grad = true` trainable
    /// parameters receive gradients; `train` selects batch statistics for
    /// batch normalisation.
    pub fn new(store: &ParamStore, grad: bool, train: bool) -> Self {
        let mut tape = Tape::new();
        let params = store
            .arrays
            .iter()
            .zip(&store.trainable)
            .map(|(a, t)| {
                if grad && *t {
                    tape.param(a.clone())
                } else {
                    tape.constant(a.clone())
                }
            })
            .collect();
        Self {
            tape,
            params,
            train,
            bn_updates: Vec::new(),
        }
    }

    pub fn param(&self, id: usize) -> Var {
        self.params[id]
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate> {
        std::mem::take(&mut self.bn_updates)
    }

    /// Gradient arrays for every parameter, zeros where none flowed.
    pub fn param_grads(&self, grads: &Grads, store: &ParamStore) -> Vec<Array2<f64>> {
        self.params
            .iter()
            .enumerate()
            .map(|(i, v)| {
                grads
                    .get(*v)
                    .cloned()
                    .unwrap_or_else(|| Array2::zeros(store.shape(i)))
            })
            .collect()
    }
}

pub fn apply_bn_updates(store: &mut ParamStore, updates: &[BnUpdate]) {
    for u in updates {
        let m = store.get_mut(u.mean_id);
        for (r, b) in m.iter_mut().zip(&u.batch_mean) {
            *r = (1.0 - BATCH_NORM_MOMENTUM) * *r + BATCH_NORM_MOMENTUM * b;
        }
        let v = store.get_mut(u.var_id);
        for (r, b) in v.iter_mut().zip(&u.batch_var) {
            *r = (1.0 - BATCH_NORM_MOMENTUM) * *r + BATCH_NORM_MOMENTUM * b;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Layer {
    name: String,
    weight: usize,
    bias: usize,
    bn: Option<BnIds>,
}

#[derive(Debug, Clone, PartialEq)]
struct BnIds {
    gamma: usize,
    beta: usize,
    running_mean: usize,
    running_var: usize,
}

/// A multilayer perceptron whose parameters live in a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub spec: MlpSpec,
    prefix: String,
    layers: Vec<Layer>,
}

impl Mlp {
    /// Registers parameters `<prefix>.l<i>.{w,b}` (and batch-norm entries)
    /// with uniform fan-in initialisation, bound `1 / sqrt(fan_in)`.
    pub fn build(
        spec: MlpSpec,
        prefix: &str,
        store: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        spec.validate()?;
        let widths = spec.widths();
        let n_layers = widths.len() - 1;
        let mut layers = Vec::with_capacity(n_layers);
        for i in 0..n_layers {
            let (fan_in, fan_out) = (widths[i], widths[i + 1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w = Array2::from_shape_simple_fn((fan_in, fan_out), || {
                rng.random_range(-bound..bound)
            });
            let b = Array2::from_shape_simple_fn((1, fan_out), || rng.random_range(-bound..bound));
            let name = format!("{prefix}.l{i}");
            let weight = store.insert(&format!("{name}.w"), w, true)?;
            let bias = store.insert(&format!("{name}.b"), b, true)?;
            let bn = if spec.batch_norm && i + 1 < n_layers {
                Some(BnIds {
                    gamma: store.insert(&format!("{name}.bn.gamma"), Array2::ones((1, fan_out)), true)?,
                    beta: store.insert(&format!("{name}.bn.beta"), Array2::zeros((1, fan_out)), true)?,
                    running_mean: store.insert(
                        &format!("{name}.bn.running_mean"),
                        Array2::zeros((1, fan_out)),
                        false,
                    )?,
                    running_var: store.insert(
                        &format!("{name}.bn.running_var"),
                        Array2::ones((1, fan_out)),
                        false,
                    )?,
                })
            } else {
                None
            };
            layers.push(Layer {
                name,
                weight,
                bias,
                bn,
            });
        }
        Ok(Self {
            spec,
            prefix: prefix.to_string(),
            layers,
        })
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    /// Runs `[batch x in_dim] -> [batch x out_dim]`. Hidden layers apply
    /// affine, optional batch norm, then the activation; the final layer is
    /// affine only.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (_, width) = g.tape.shape(x);
        if width != self.spec.in_dim {
            return Err(Error::arg(format!(
                "{}: input width {width}, expected {}",
                self.prefix, self.spec.in_dim
            )));
        }
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            let w = g.param(layer.weight);
            let b = g.param(layer.bias);
            h = g.tape.matmul(h, w);
            h = g.tape.add_bias(h, b);
            if i < last {
                if let Some(bn) = &layer.bn {
                    h = self.batch_norm(g, h, bn);
                }
                h = g.tape.leaky_relu(h, self.spec.leaky_slope);
            }
            if g.tape.value(h).iter().any(|v| !v.is_finite()) {
                return Err(Error::numeric(&layer.name));
            }
        }
        Ok(h)
    }

    fn batch_norm(&self, g: &mut Graph, h: Var, bn: &BnIds) -> Var {
        let gamma = g.param(bn.gamma);
        let beta = g.param(bn.beta);
        if g.train {
            let (out, mean, var) = g.tape.batch_norm(h, gamma, beta, BATCH_NORM_EPS);
            g.bn_updates.push(BnUpdate {
                mean_id: bn.running_mean,
                var_id: bn.running_var,
                batch_mean: mean,
                batch_var: var,
            });
            out
        } else {
            let mean = g.tape.value(g.param(bn.running_mean)).clone();
            let var = g.tape.value(g.param(bn.running_var)).clone();
            let inv = var.mapv(|v| 1.0 / (v + BATCH_NORM_EPS).sqrt());
            let shift = -(&mean * &inv);
            let inv = g.tape.constant(inv);
            let shift = g.tape.constant(shift);
            let scaled = g.tape.mul_row(h, inv);
            let centred = g.tape.add_bias(scaled, shift);
            let out = g.tape.mul_row(centred, gamma);
            g.tape.add_bias(out, beta)
        }
    }
}

/// Gaussian parameters split from a `[batch x 2k]` head.
#[derive(Debug, Clone, Copy)]
pub struct GaussianVars {
    pub mean: Var,
    pub log_var: Var,
}

/// First `k` columns are the mean, the last `k` the clamped log-variance.
pub fn gaussian_head(t: &mut Tape, out: Var) -> Result<GaussianVars> {
    let (_, w) = t.shape(out);
    if w % 2 != 0 || w == 0 {
        return Err(Error::arg(format!("gaussian_head: odd width {w}")));
    }
    let k = w / 2;
    let mean = t.cols(out, 0, k);
    let raw = t.cols(out, k, k);
    let log_var = t.clamp(raw, LOG_VAR_MIN, LOG_VAR_MAX);
    Ok(GaussianVars { mean, log_var })
}

/// Reads row `r` of a Gaussian head into a [`DiagGaussian`].
pub fn gaussian_row(t: &Tape, g: GaussianVars, r: usize) -> DiagGaussian {
    DiagGaussian {
        mean: t.value(g.mean).row(r).to_vec(),
        log_var: t.value(g.log_var).row(r).to_vec(),
    }
}

pub fn gaussian_rows(t: &Tape, g: GaussianVars) -> Vec<DiagGaussian> {
    (0..t.shape(g.mean).0).map(|r| gaussian_row(t, g, r)).collect()
}
