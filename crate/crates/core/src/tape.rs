//! Reverse-mode differentiation over dense row-major matrices.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles during a
//! forward pass. [`Tape::backward`] then walks the record in reverse and
//! returns the gradient of a scalar output with respect to every node that
//! depends on a leaf created with `requires_grad = true`.
//!
//! Rows are batch elements throughout; a `[1 x 1]` matrix is a scalar.

use ndarray::{s, concatenate, Array2, ArrayView2, Axis, Zip};

use crate::distributions::LOG_2PI;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    MulRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    LeakyRelu(Var, f64),
    Exp(Var),
    Tanh(Var),
    Softplus(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    MaxConst(Var, f64),
    Cols(Var, usize),
    Concat(Vec<Var>),
    SumAll(Var),
    RowSums(Var),
    ColSums(Var),
    Norm(Var),
    GaussLogDensity(Var, Var, Var),
    Mws { z: Var, mu: Var, log_var: Var },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<f64>,
        inv_std: Vec<f64>,
    },
}

struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`].
pub struct Grads {
    grads: Vec<Option<Array2<f64>>>,
}

impl Grads {
    /// Gradient of the output with respect to `v`, or `None` when `v` does not
    /// influence the output through a differentiable path.
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<f64>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape(a: &Array2<f64>) -> (usize, usize) {
    (a.nrows(), a.ncols())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Array2<f64>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn row(&mut self, values: &[f64], requires_grad: bool) -> Var {
        let m = Array2::from_shape_vec((1, values.len()), values.to_vec()).expect("row shape");
        if requires_grad {
            self.param(m)
        } else {
            self.constant(m)
        }
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(shape(m), (1, 1));
        m[[0, 0]]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        shape(self.value(v))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    /// `x + b` with `b` a `[1 x n]` row broadcast over the rows of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let out = self.value(x) + self.value(b);
        self.push(out, Op::AddBias(x, b), &[x, b])
    }

    /// `x * r` with `r` a `[1 x n]` row broadcast over the rows of `x`.
    pub fn mul_row(&mut self, x: Var, r: Var) -> Var {
        let out = self.value(x) * self.value(r);
        self.push(out, Op::MulRow(x, r), &[x, r])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) - self.value(b);
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) * self.value(b);
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) * c;
        self.push(out, Op::Scale(a, c), &[a])
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) + c;
        self.push(out, Op::Offset(a), &[a])
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let out = self.value(a).mapv(|v| if v > 0.0 { v } else { slope * v });
        self.push(out, Op::LeakyRelu(a, slope), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::exp);
        self.push(out, Op::Exp(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::tanh);
        self.push(out, Op::Tanh(a), &[a])
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(softplus);
        self.push(out, Op::Softplus(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|v| v * v);
        self.push(out, Op::Square(a), &[a])
    }

    /// Elementwise clamp; the gradient is zero outside `[lo, hi]`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(a).mapv(|v| v.clamp(lo, hi));
        self.push(out, Op::Clamp(a, lo, hi), &[a])
    }

    /// Elementwise `max(a, c)`; the gradient flows only where `a > c`.
    pub fn max_const(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).mapv(|v| v.max(c));
        self.push(out, Op::MaxConst(a, c), &[a])
    }

    /// Columns `start..start + width`.
    pub fn cols(&mut self, a: Var, start: usize, width: usize) -> Var {
        let out = self.value(a).slice(s![.., start..start + width]).to_owned();
        self.push(out, Op::Cols(a, start), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        if parts.len() == 1 {
            return parts[0];
        }
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|p| self.value(*p).view()).collect();
        let out = concatenate(Axis(1), &views).expect("concat: row counts differ");
        self.push(out, Op::Concat(parts.to_vec()), parts)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(out, Op::SumAll(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// `[n x m] -> [n x 1]`.
    pub fn row_sums(&mut self, a: Var) -> Var {
        let out = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(out, Op::RowSums(a), &[a])
    }

    /// `[n x m] -> [1 x m]`.
    pub fn col_sums(&mut self, a: Var) -> Var {
        let out = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        self.push(out, Op::ColSums(a), &[a])
    }

    /// Euclidean norm over every element. The subgradient at zero is zero.
    pub fn norm(&mut self, a: Var) -> Var {
        let n = self.value(a).iter().map(|v| v * v).sum::<f64>().sqrt();
        self.push(Array2::from_elem((1, 1), n), Op::Norm(a), &[a])
    }

    /// Elementwise `log N(z; mu, exp(log_var))`.
    pub fn gauss_log_density(&mut self, z: Var, mu: Var, log_var: Var) -> Var {
        let mut out = Array2::zeros(self.shape(z));
        Zip::from(&mut out)
            .and(self.value(z))
            .and(self.value(mu))
            .and(self.value(log_var))
            .for_each(|o, &z, &m, &lv| {
                let r = z - m;
                *o = -0.5 * (LOG_2PI + lv + r * r * (-lv).exp());
            });
        self.push(out, Op::GaussLogDensity(z, mu, log_var), &[z, mu, log_var])
    }

    /// Minibatch-weighted-sampling estimates of the aggregate posterior.
    ///
    /// Row `k` of `z` was sampled from the diagonal Gaussian in row `k` of
    /// (`mu`, `log_var`). Returns `[M x 2]`: column 0 holds
    /// `log sum_j q(z_k | j) - log(N M)`, column 1 holds
    /// `sum_d [log sum_j q(z_kd | j) - log(N M)]`.
    pub fn mws(&mut self, z: Var, mu: Var, log_var: Var, dataset_size: usize) -> Var {
        let out = mws_forward(
            self.value(z),
            self.value(mu),
            self.value(log_var),
            dataset_size,
        );
        self.push(out, Op::Mws { z, mu, log_var }, &[z, mu, log_var])
    }

    /// Batch normalisation with batch statistics (training mode).
    /// Returns the output and the per-column batch mean and biased variance.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> (Var, Vec<f64>, Vec<f64>) {
        let xv = self.value(x);
        let n = xv.nrows() as f64;
        let mean = xv.sum_axis(Axis(0)) / n;
        let centered = xv - &mean;
        let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / n;
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = centered;
        for mut row in xhat.rows_mut() {
            for (v, s) in row.iter_mut().zip(&inv_std) {
                *v *= s;
            }
        }
        let out = &xhat * self.value(gamma) + self.value(beta);
        let (mean, var) = (mean.to_vec(), var.to_vec());
        let v = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        );
        (v, mean, var)
    }

    /// Reverse pass from the scalar `out`.
    pub fn backward(&self, out: Var) -> Grads {
        assert_eq!(self.shape(out), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(Array2::from_elem((1, 1), 1.0));
        for idx in (0..=out.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Grads { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, idx: usize, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    let ga = g.dot(&self.value(*b).t());
                    self.accumulate(grads, *a, ga);
                }
                if self.wants(*b) {
                    let gb = self.value(*a).t().dot(g);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::AddBias(x, b) => {
                self.accumulate(grads, *x, g.clone());
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulRow(x, r) => {
                if self.wants(*x) {
                    self.accumulate(grads, *x, g * self.value(*r));
                }
                if self.wants(*r) {
                    let gr = (g * self.value(*x)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accumulate(grads, *r, gr);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.wants(*b) {
                    self.accumulate(grads, *b, -g);
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g * self.value(*b));
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g * self.value(*a));
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g * *c),
            Op::Offset(a) => self.accumulate(grads, *a, g.clone()),
            Op::LeakyRelu(a, slope) => {
                let mut ga = g.clone();
                Zip::from(&mut ga)
                    .and(self.value(*a))
                    .for_each(|d, &x| {
                        if x <= 0.0 {
                            *d *= slope;
                        }
                    });
                self.accumulate(grads, *a, ga);
            }
            Op::Exp(a) => self.accumulate(grads, *a, g * &node.value),
            Op::Tanh(a) => {
                let ga = g * &node.value.mapv(|t| 1.0 - t * t);
                self.accumulate(grads, *a, ga);
            }
            Op::Softplus(a) => {
                let ga = g * &self.value(*a).mapv(sigmoid);
                self.accumulate(grads, *a, ga);
            }
            Op::Square(a) => {
                let ga = g * &self.value(*a).mapv(|x| 2.0 * x);
                self.accumulate(grads, *a, ga);
            }
            Op::Clamp(a, lo, hi) => {
                let mut ga = g.clone();
                Zip::from(&mut ga).and(self.value(*a)).for_each(|d, &x| {
                    if x < *lo || x > *hi {
                        *d = 0.0;
                    }
                });
                self.accumulate(grads, *a, ga);
            }
            Op::MaxConst(a, c) => {
                let mut ga = g.clone();
                Zip::from(&mut ga).and(self.value(*a)).for_each(|d, &x| {
                    if x <= *c {
                        *d = 0.0;
                    }
                });
                self.accumulate(grads, *a, ga);
            }
            Op::Cols(a, start) => {
                if self.wants(*a) {
                    let mut ga = Array2::zeros(self.shape(*a));
                    ga.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                    self.accumulate(grads, *a, ga);
                }
            }
            Op::Concat(parts) => {
                let mut col = 0;
                for p in parts {
                    let w = self.shape(*p).1;
                    if self.wants(*p) {
                        self.accumulate(grads, *p, g.slice(s![.., col..col + w]).to_owned());
                    }
                    col += w;
                }
            }
            Op::SumAll(a) => {
                let ga = Array2::from_elem(self.shape(*a), g[[0, 0]]);
                self.accumulate(grads, *a, ga);
            }
            Op::RowSums(a) => {
                let (r, c) = self.shape(*a);
                let ga = Array2::from_shape_fn((r, c), |(i, _)| g[[i, 0]]);
                self.accumulate(grads, *a, ga);
            }
            Op::ColSums(a) => {
                let (r, c) = self.shape(*a);
                let ga = Array2::from_shape_fn((r, c), |(_, j)| g[[0, j]]);
                self.accumulate(grads, *a, ga);
            }
            Op::Norm(a) => {
                let n = node.value[[0, 0]];
                let ga = if n > 0.0 {
                    self.value(*a) * (g[[0, 0]] / n)
                } else {
                    Array2::zeros(self.shape(*a))
                };
                self.accumulate(grads, *a, ga);
            }
            Op::GaussLogDensity(z, mu, lv) => {
                let (zv, mv, lvv) = (self.value(*z), self.value(*mu), self.value(*lv));
                let (r, c) = shape(zv);
                let mut gz = Array2::zeros((r, c));
                let mut glv = Array2::zeros((r, c));
                for i in 0..r {
                    for j in 0..c {
                        let prec = (-lvv[[i, j]]).exp();
                        let res = zv[[i, j]] - mv[[i, j]];
                        gz[[i, j]] = -g[[i, j]] * res * prec;
                        glv[[i, j]] = g[[i, j]] * (-0.5 + 0.5 * res * res * prec);
                    }
                }
                if self.wants(*mu) {
                    self.accumulate(grads, *mu, -&gz);
                }
                self.accumulate(grads, *z, gz);
                self.accumulate(grads, *lv, glv);
            }
            Op::Mws { z, mu, log_var } => {
                let (gz, gmu, glv) =
                    mws_backward(self.value(*z), self.value(*mu), self.value(*log_var), g);
                self.accumulate(grads, *z, gz);
                self.accumulate(grads, *mu, gmu);
                self.accumulate(grads, *log_var, glv);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gamma);
                if self.wants(*beta) {
                    self.accumulate(grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.wants(*gamma) {
                    let gg = (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accumulate(grads, *gamma, gg);
                }
                if self.wants(*x) {
                    let n = g.nrows() as f64;
                    let dxhat = g * gv;
                    let sum_d = dxhat.sum_axis(Axis(0));
                    let sum_dx = (&dxhat * xhat).sum_axis(Axis(0));
                    let mut gx = Array2::zeros(self.shape(*x));
                    for i in 0..g.nrows() {
                        for j in 0..g.ncols() {
                            gx[[i, j]] = inv_std[j] / n
                                * (n * dxhat[[i, j]] - sum_d[j] - xhat[[i, j]] * sum_dx[j]);
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn log_sum_exp(xs: impl IntoIterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().into_iter().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.into_iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Pairwise log densities `l[k][j][d] = log N(z_kd; mu_jd, exp(lv_jd))`,
/// laid out as `[k * M + j][d]`.
fn pairwise_log_density(z: &Array2<f64>, mu: &Array2<f64>, lv: &Array2<f64>) -> Array2<f64> {
    let (m, dim) = shape(z);
    let prec = lv.mapv(|v| (-v).exp());
    let mut out = Array2::zeros((m * m, dim));
    for k in 0..m {
        for j in 0..m {
            let mut row = out.row_mut(k * m + j);
            for d in 0..dim {
                let r = z[[k, d]] - mu[[j, d]];
                row[d] = -0.5 * (LOG_2PI + lv[[j, d]] + r * r * prec[[j, d]]);
            }
        }
    }
    out
}

fn mws_forward(z: &Array2<f64>, mu: &Array2<f64>, lv: &Array2<f64>, n: usize) -> Array2<f64> {
    let (m, dim) = shape(z);
    let log_nm = ((n * m) as f64).ln();
    let l = pairwise_log_density(z, mu, lv);
    let mut out = Array2::zeros((m, 2));
    for k in 0..m {
        let block = l.slice(s![k * m..(k + 1) * m, ..]);
        let joint = log_sum_exp(block.rows().into_iter().map(|r| r.sum()).collect::<Vec<_>>());
        let mut marg = 0.0;
        for d in 0..dim {
            marg += log_sum_exp(block.column(d).iter().copied()) - log_nm;
        }
        out[[k, 0]] = joint - log_nm;
        out[[k, 1]] = marg;
    }
    out
}

fn softmax_in_place(xs: &mut [f64]) {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - m).exp();
        total += *x;
    }
    for x in xs.iter_mut() {
        *x /= total;
    }
}

fn mws_backward(
    z: &Array2<f64>,
    mu: &Array2<f64>,
    lv: &Array2<f64>,
    g: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let (m, dim) = shape(z);
    let l = pairwise_log_density(z, mu, lv);
    let prec = lv.mapv(|v| (-v).exp());
    let mut gz = Array2::zeros((m, dim));
    let mut gmu = Array2::zeros((m, dim));
    let mut glv = Array2::zeros((m, dim));
    let mut w = vec![0.0; m];
    let mut v = vec![0.0; m];
    for k in 0..m {
        let block = l.slice(s![k * m..(k + 1) * m, ..]);
        for (j, r) in block.rows().into_iter().enumerate() {
            w[j] = r.sum();
        }
        softmax_in_place(&mut w);
        for d in 0..dim {
            for j in 0..m {
                v[j] = block[[j, d]];
            }
            softmax_in_place(&mut v);
            for j in 0..m {
                let c = g[[k, 0]] * w[j] + g[[k, 1]] * v[j];
                if c == 0.0 {
                    continue;
                }
                let r = z[[k, d]] - mu[[j, d]];
                let rp = r * prec[[j, d]];
                gz[[k, d]] -= c * rp;
                gmu[[j, d]] += c * rp;
                glv[[j, d]] += c * (-0.5 + 0.5 * r * rp);
            }
        }
    }
    (gz, gmu, glv)
}
