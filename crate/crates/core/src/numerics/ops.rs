//! Primitive operations and their vector-Jacobian products.
//!
//! Every forward function here has a matching `*_backward` that maps the
//! gradient of the output to gradients of the inputs. The tape in
//! [`super::graph`] composes them.

use serde::{Deserialize, Serialize};

use super::matrix::{MaskBits, Matrix};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.rows() {
        return Err(Error::dims("matmul", a.shape(), b.shape()));
    }
    let (n, k, m) = (a.rows(), a.cols(), b.cols());
    let mut out = Matrix::zeros(n, m);
    let bs = b.as_slice();
    for i in 0..n {
        let arow = a.row(i);
        let orow = out.row_mut(i);
        for (p, &av) in arow.iter().enumerate().take(k) {
            if av == 0.0 {
                continue;
            }
            let brow = &bs[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(out)
}

/// `g · bᵀ`
fn matmul_bt(g: &Matrix, b: &Matrix) -> Matrix {
    let (n, m, k) = (g.rows(), g.cols(), b.rows());
    let mut out = Matrix::zeros(n, k);
    for i in 0..n {
        let grow = g.row(i);
        for p in 0..k {
            let brow = b.row(p);
            let mut acc = 0.0;
            for j in 0..m {
                acc += grow[j] * brow[j];
            }
            out.set(i, p, acc);
        }
    }
    out
}

/// `aᵀ · g`
fn matmul_at(a: &Matrix, g: &Matrix) -> Matrix {
    let (n, k, m) = (a.rows(), a.cols(), g.cols());
    let mut out = Matrix::zeros(k, m);
    for i in 0..n {
        let arow = a.row(i);
        let grow = g.row(i);
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = out.row_mut(p);
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
    out
}

/// Gradients of `a · b` with respect to `a` and `b`.
pub fn matmul_backward(a: &Matrix, b: &Matrix, grad_out: &Matrix) -> (Matrix, Matrix) {
    (matmul_bt(grad_out, b), matmul_at(a, grad_out))
}

/// Per-row statistics kept from the forward pass of [`layer_norm_forward`].
#[derive(Clone, Debug)]
pub struct LayerNormCache {
    pub normalized: Matrix,
    pub inv_std: Vec<f64>,
}

pub fn layer_norm(x: &Matrix, gamma: &[f64], beta: &[f64], eps: f64) -> Result<Matrix> {
    layer_norm_forward(x, gamma, beta, eps).map(|(y, _)| y)
}

pub fn layer_norm_forward(
    x: &Matrix,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> Result<(Matrix, LayerNormCache)> {
    let d = x.cols();
    if gamma.len() != d || beta.len() != d {
        return Err(Error::dims("layer_norm", x.shape(), (gamma.len(), beta.len())));
    }
    if eps <= 0.0 {
        return Err(Error::Config(format!("layer_norm epsilon must be positive, got {eps}")));
    }
    let mut y = Matrix::zeros(x.rows(), d);
    let mut normalized = Matrix::zeros(x.rows(), d);
    let mut inv_std = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std.push(is);
        let nrow = normalized.row_mut(r);
        for c in 0..d {
            nrow[c] = (row[c] - mean) * is;
        }
        let yrow = y.row_mut(r);
        for c in 0..d {
            yrow[c] = normalized.get(r, c) * gamma[c] + beta[c];
        }
    }
    Ok((y, LayerNormCache { normalized, inv_std }))
}

/// Returns `(grad_x, grad_gamma, grad_beta)`.
pub fn layer_norm_backward(
    cache: &LayerNormCache,
    gamma: &[f64],
    grad_out: &Matrix,
) -> (Matrix, Vec<f64>, Vec<f64>) {
    let (n, d) = grad_out.shape();
    let mut gx = Matrix::zeros(n, d);
    let mut ggamma = vec![0.0; d];
    let mut gbeta = vec![0.0; d];
    let mut gxhat = vec![0.0; d];
    for r in 0..n {
        let g = grad_out.row(r);
        let xhat = cache.normalized.row(r);
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for c in 0..d {
            ggamma[c] += g[c] * xhat[c];
            gbeta[c] += g[c];
            gxhat[c] = g[c] * gamma[c];
            sum_g += gxhat[c];
            sum_gx += gxhat[c] * xhat[c];
        }
        let scale = cache.inv_std[r] / d as f64;
        let out = gx.row_mut(r);
        for c in 0..d {
            out[c] = scale * (d as f64 * gxhat[c] - sum_g - xhat[c] * sum_gx);
        }
    }
    (gx, ggamma, gbeta)
}

/// Element-wise non-linearity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    #[default]
    Gelu,
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "gelu" => Ok(Activation::Gelu),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Gelu => "gelu",
        })
    }
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Gelu => x * std_normal_cdf(x),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => {
                std_normal_cdf(x) + x * FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
            }
        }
    }
}

pub fn activation(x: &Matrix, kind: Activation) -> Matrix {
    x.map(|v| kind.apply(v))
}

pub fn activation_backward(x: &Matrix, kind: Activation, grad_out: &Matrix) -> Matrix {
    let mut g = grad_out.clone();
    for (gv, &xv) in g.as_mut_slice().iter_mut().zip(x.as_slice()) {
        *gv *= kind.derivative(xv);
    }
    g
}

/// Softmax over the valid entries of `z`; invalid entries are exactly zero.
pub fn masked_softmax(z: &[f64], m: &MaskBits) -> Result<Vec<f64>> {
    if z.len() != m.dim() {
        return Err(Error::dims("masked_softmax", (1, z.len()), (1, m.dim())));
    }
    let max = m
        .valid_indices()
        .map(|i| z[i])
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::EmptySet("masked_softmax: no valid entries".into()));
    }
    let mut out = vec![0.0; z.len()];
    let mut total = 0.0;
    for i in m.valid_indices() {
        let e = (z[i] - max).exp();
        out[i] = e;
        total += e;
    }
    for v in &mut out {
        *v /= total;
    }
    Ok(out)
}

/// VJP of softmax given its output `y`.
pub fn masked_softmax_backward(y: &[f64], grad_out: &[f64]) -> Vec<f64> {
    let dot: f64 = y.iter().zip(grad_out).map(|(a, b)| a * b).sum();
    y.iter().zip(grad_out).map(|(&yi, &gi)| yi * (gi - dot)).collect()
}

/// Column-wise max over valid rows. Returns the pooled row and, per column,
/// the first valid row attaining the max.
pub fn masked_max_pool(x: &Matrix, m: &MaskBits) -> Result<(Vec<f64>, Vec<usize>)> {
    if x.rows() != m.dim() {
        return Err(Error::dims("masked_max_pool", x.shape(), (m.dim(), 1)));
    }
    let mut rows = m.valid_indices();
    let first = rows
        .next()
        .ok_or_else(|| Error::EmptySet("masked_max_pool: no valid rows".into()))?;
    let mut out = x.row(first).to_vec();
    let mut arg = vec![first; x.cols()];
    for r in rows {
        for (c, &v) in x.row(r).iter().enumerate() {
            if v > out[c] {
                out[c] = v;
                arg[c] = r;
            }
        }
    }
    Ok((out, arg))
}

pub fn masked_max_pool_backward(argmax: &[usize], rows: usize, grad_out: &[f64]) -> Matrix {
    let mut g = Matrix::zeros(rows, argmax.len());
    for (c, (&r, &gv)) in argmax.iter().zip(grad_out).enumerate() {
        g.set(r, c, g.get(r, c) + gv);
    }
    g
}
