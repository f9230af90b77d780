//! Evaluation tape for reverse-mode differentiation.
//!
//! Forward calls record a node per primitive in evaluation order.
//! [`Graph::backward`] replays the tape in reverse, applying each node's
//! vector-Jacobian product from [`super::ops`].

use std::collections::HashMap;

use super::matrix::{MaskBits, Matrix, ParamId, ParamStore};
use super::ops::{self, Activation, LayerNormCache};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for operations defined outside this module.
///
/// `backward` receives the input values, the op's output value, and the
/// gradient of the output, and returns one gradient per input (same shapes).
pub trait BackwardRule: Send + Sync {
    fn backward(&self, inputs: &[&Matrix], output: &Matrix, grad_out: &Matrix) -> Vec<Matrix>;
}

enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        cache: LayerNormCache,
        beta: Var,
    },
    Act(Var, Activation),
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    SoftmaxRows(Var),
    ConcatCols(Vec<Var>),
    ConcatRow(Var, Var),
    SliceCols(Var, usize),
    StackRows(Vec<Var>),
    Max(Var, Var),
    Clamp(Var, f64, f64),
    Custom {
        inputs: Vec<Var>,
        rule: Box<dyn BackwardRule>,
    },
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation.
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NumericInstability(format!(
                "non-finite value produced at tape node {}",
                self.nodes.len()
            )));
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        let needs_grad = false;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is tracked.
    pub fn input(&mut self, value: Matrix) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: store.value(id).clone(),
            op: Op::Param,
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::matmul(self.value(a), self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Add(a, b), ng)
    }

    /// `x + row`, with the `1 x c` row broadcast over every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (xv, rv) = (self.value(x), self.value(row));
        if rv.rows() != 1 || rv.cols() != xv.cols() {
            return Err(Error::dims("add_row", xv.shape(), rv.shape()));
        }
        let mut value = xv.clone();
        for r in 0..value.rows() {
            for (o, b) in value.row_mut(r).iter_mut().zip(rv.as_slice()) {
                *o += b;
            }
        }
        let ng = self.needs(x) || self.needs(row);
        self.push(value, Op::AddRow(x, row), ng)
    }

    /// `x ⊙ row`, with the `1 x c` row broadcast over every row of `x`.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (xv, rv) = (self.value(x), self.value(row));
        if rv.rows() != 1 || rv.cols() != xv.cols() {
            return Err(Error::dims("mul_row", xv.shape(), rv.shape()));
        }
        let mut value = xv.clone();
        for r in 0..value.rows() {
            for (o, b) in value.row_mut(r).iter_mut().zip(rv.as_slice()) {
                *o *= b;
            }
        }
        let ng = self.needs(x) || self.needs(row);
        self.push(value, Op::MulRow(x, row), ng)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let value = self.value(x).scale(s);
        let ng = self.needs(x);
        self.push(value, Op::Scale(x, s), ng)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).transpose();
        let ng = self.needs(x);
        self.push(value, Op::Transpose(x), ng)
    }

    /// Per-row layer normalization; `gamma` and `beta` are `1 x c`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (value, cache) = ops::layer_norm_forward(
            self.value(x),
            self.value(gamma).as_slice(),
            self.value(beta).as_slice(),
            eps,
        )?;
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                cache,
                beta,
            },
            ng,
        )
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let value = ops::activation(self.value(x), kind);
        let ng = self.needs(x);
        self.push(value, Op::Act(x, kind), ng)
    }

    /// Column-wise max over valid rows, producing a `1 x c` row.
    pub fn masked_max_pool(&mut self, x: Var, mask: &MaskBits) -> Result<Var> {
        let (pooled, argmax) = ops::masked_max_pool(self.value(x), mask)?;
        let ng = self.needs(x);
        self.push(Matrix::row_vector(&pooled), Op::MaxPool { x, argmax }, ng)
    }

    /// Row-wise masked softmax of an `n x m` score matrix. Columns where
    /// `key_mask` is false get weight zero; rows where `query_mask` is false
    /// are all-zero.
    pub fn masked_softmax_rows(
        &mut self,
        x: Var,
        key_mask: &MaskBits,
        query_mask: &MaskBits,
    ) -> Result<Var> {
        let xv = self.value(x);
        if key_mask.dim() != xv.cols() || query_mask.dim() != xv.rows() {
            return Err(Error::dims(
                "masked_softmax_rows",
                xv.shape(),
                (query_mask.dim(), key_mask.dim()),
            ));
        }
        let mut value = Matrix::zeros(xv.rows(), xv.cols());
        for r in query_mask.valid_indices() {
            let p = ops::masked_softmax(xv.row(r), key_mask)?;
            value.row_mut(r).copy_from_slice(&p);
        }
        let ng = self.needs(x);
        self.push(value, Op::SoftmaxRows(x), ng)
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut value = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.rows() != rows {
                return Err(Error::dims("concat_cols", (rows, offset), pv.shape()));
            }
            for r in 0..rows {
                value.row_mut(r)[offset..offset + pv.cols()].copy_from_slice(pv.row(r));
            }
            offset += pv.cols();
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), ng)
    }

    /// `[x | row]` per row of `x`, with the `1 x c` row broadcast.
    pub fn concat_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (xv, rv) = (self.value(x), self.value(row));
        if rv.rows() != 1 {
            return Err(Error::dims("concat_row", xv.shape(), rv.shape()));
        }
        let (n, a, b) = (xv.rows(), xv.cols(), rv.cols());
        let mut value = Matrix::zeros(n, a + b);
        for r in 0..n {
            let out = value.row_mut(r);
            out[..a].copy_from_slice(xv.row(r));
            out[a..].copy_from_slice(rv.as_slice());
        }
        let ng = self.needs(x) || self.needs(row);
        self.push(value, Op::ConcatRow(x, row), ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if start + len > xv.cols() {
            return Err(Error::dims("slice_cols", xv.shape(), (start, len)));
        }
        let value = xv.slice_cols(start, len);
        let ng = self.needs(x);
        self.push(value, Op::SliceCols(x, start), ng)
    }

    /// Stacks `1 x c` rows into an `n x c` matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let cols = self.value(rows[0]).cols();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            let rv = self.value(r);
            if rv.shape() != (1, cols) {
                return Err(Error::dims("stack_rows", (1, cols), rv.shape()));
            }
            data.extend_from_slice(rv.as_slice());
        }
        let value = Matrix::from_vec(rows.len(), cols, data)?;
        let ng = rows.iter().any(|&r| self.needs(r));
        self.push(value, Op::StackRows(rows.to_vec()), ng)
    }

    /// Element-wise maximum; ties send the gradient to `a`.
    pub fn max(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::dims("max", av.shape(), bv.shape()));
        }
        let mut value = av.clone();
        for (o, &y) in value.as_mut_slice().iter_mut().zip(bv.as_slice()) {
            if y > *o {
                *o = y;
            }
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Max(a, b), ng)
    }

    /// Clamp into `[lo, hi]`; gradient passes only where the input is inside.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        let value = self.value(x).map(|v| v.clamp(lo, hi));
        let ng = self.needs(x);
        self.push(value, Op::Clamp(x, lo, hi), ng)
    }

    /// Records an op whose forward value was computed by the caller.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        value: Matrix,
        rule: Box<dyn BackwardRule>,
    ) -> Result<Var> {
        let ng = inputs.iter().any(|&v| self.needs(v));
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                rule,
            },
            ng,
        )
    }

    /// Replays the tape backwards from `output`, seeded with `seed` as the
    /// gradient of `output`.
    pub fn backward(&self, output: Var, seed: Matrix) -> Result<Gradients> {
        if seed.shape() != self.value(output).shape() {
            return Err(Error::dims("backward", self.value(output).shape(), seed.shape()));
        }
        let mut grads: Vec<Option<Matrix>> = Vec::new();
        grads.resize_with(output.0 + 1, || None);
        grads[output.0] = Some(seed);

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            match &node.op {
                Op::Leaf | Op::Param => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (ga, gb) = ops::matmul_backward(self.value(*a), self.value(*b), &g);
                    self.acc(&mut grads, *a, ga);
                    self.acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    self.acc(&mut grads, *a, g.clone());
                    self.acc(&mut grads, *b, g);
                }
                Op::AddRow(x, row) => {
                    if self.needs(*row) {
                        let mut gr = vec![0.0; g.cols()];
                        for r in 0..g.rows() {
                            for (o, v) in gr.iter_mut().zip(g.row(r)) {
                                *o += v;
                            }
                        }
                        self.acc(&mut grads, *row, Matrix::row_vector(&gr));
                    }
                    self.acc(&mut grads, *x, g);
                }
                Op::MulRow(x, row) => {
                    let (xv, rv) = (self.value(*x), self.value(*row));
                    if self.needs(*row) {
                        let mut gr = vec![0.0; g.cols()];
                        for r in 0..g.rows() {
                            for ((o, gv), xv) in gr.iter_mut().zip(g.row(r)).zip(xv.row(r)) {
                                *o += gv * xv;
                            }
                        }
                        self.acc(&mut grads, *row, Matrix::row_vector(&gr));
                    }
                    if self.needs(*x) {
                        let mut gx = g;
                        for r in 0..gx.rows() {
                            for (o, b) in gx.row_mut(r).iter_mut().zip(rv.as_slice()) {
                                *o *= b;
                            }
                        }
                        self.acc(&mut grads, *x, gx);
                    }
                }
                Op::Scale(x, s) => {
                    let gx = g.scale(*s);
                    self.acc(&mut grads, *x, gx);
                }
                Op::Transpose(x) => self.acc(&mut grads, *x, g.transpose()),
                Op::LayerNorm {
                    x,
                    gamma,
                    cache,
                    beta,
                } => {
                    let (gx, gg, gb) =
                        ops::layer_norm_backward(cache, self.value(*gamma).as_slice(), &g);
                    self.acc(&mut grads, *x, gx);
                    self.acc(&mut grads, *gamma, Matrix::row_vector(&gg));
                    self.acc(&mut grads, *beta, Matrix::row_vector(&gb));
                }
                Op::Act(x, kind) => {
                    let gx = ops::activation_backward(self.value(*x), *kind, &g);
                    self.acc(&mut grads, *x, gx);
                }
                Op::MaxPool { x, argmax } => {
                    let gx =
                        ops::masked_max_pool_backward(argmax, self.value(*x).rows(), g.as_slice());
                    self.acc(&mut grads, *x, gx);
                }
                Op::SoftmaxRows(x) => {
                    let y = &node.value;
                    let mut gx = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let row = ops::masked_softmax_backward(y.row(r), g.row(r));
                        gx.row_mut(r).copy_from_slice(&row);
                    }
                    self.acc(&mut grads, *x, gx);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let c = self.value(p).cols();
                        if self.needs(p) {
                            self.acc(&mut grads, p, g.slice_cols(offset, c));
                        }
                        offset += c;
                    }
                }
                Op::ConcatRow(x, row) => {
                    let a = self.value(*x).cols();
                    let b = g.cols() - a;
                    if self.needs(*row) {
                        let mut gr = vec![0.0; b];
                        for r in 0..g.rows() {
                            for (o, v) in gr.iter_mut().zip(&g.row(r)[a..]) {
                                *o += v;
                            }
                        }
                        self.acc(&mut grads, *row, Matrix::row_vector(&gr));
                    }
                    if self.needs(*x) {
                        self.acc(&mut grads, *x, g.slice_cols(0, a));
                    }
                }
                Op::SliceCols(x, start) => {
                    let xv = self.value(*x);
                    let mut gx = Matrix::zeros(xv.rows(), xv.cols());
                    for r in 0..g.rows() {
                        gx.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    self.acc(&mut grads, *x, gx);
                }
                Op::StackRows(rows) => {
                    for (i, &r) in rows.iter().enumerate() {
                        if self.needs(r) {
                            self.acc(&mut grads, r, Matrix::row_vector(g.row(i)));
                        }
                    }
                }
                Op::Max(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let mut ga = Matrix::zeros(g.rows(), g.cols());
                    let mut gb = Matrix::zeros(g.rows(), g.cols());
                    for i in 0..g.len() {
                        if bv.as_slice()[i] > av.as_slice()[i] {
                            gb.as_mut_slice()[i] = g.as_slice()[i];
                        } else {
                            ga.as_mut_slice()[i] = g.as_slice()[i];
                        }
                    }
                    self.acc(&mut grads, *a, ga);
                    self.acc(&mut grads, *b, gb);
                }
                Op::Clamp(x, lo, hi) => {
                    let mut gx = g;
                    for (o, &v) in gx.as_mut_slice().iter_mut().zip(self.value(*x).as_slice()) {
                        if v < *lo || v > *hi {
                            *o = 0.0;
                        }
                    }
                    self.acc(&mut grads, *x, gx);
                }
                Op::Custom { inputs, rule } => {
                    let vals: Vec<&Matrix> = inputs.iter().map(|&v| self.value(v)).collect();
                    let gs = rule.backward(&vals, &node.value, &g);
                    for (&v, gv) in inputs.iter().zip(gs) {
                        self.acc(&mut grads, v, gv);
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
        if !self.needs(v) {
            return;
        }
        debug_assert_eq!(g.shape(), self.value(v).shape());
        match &mut grads[v.0] {
            Some(existing) => {
                for (a, b) in existing.as_mut_slice().iter_mut().zip(g.as_slice()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    /// Adds the gradients of every parameter leaf into `store`.
    pub fn accumulate_into(&self, grads: &Gradients, store: &mut ParamStore) {
        for (&id, &v) in &self.params {
            if let Some(g) = grads.get(v) {
                let p = store.get_mut(id);
                for (a, b) in p.grad.as_mut_slice().iter_mut().zip(g.as_slice()) {
                    *a += b;
                }
            }
        }
    }
}

/// Result of [`Graph::backward`]: gradients of leaf nodes.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}
