//! Reverse-mode differentiation over a recorded operation list.
//!
//! Every operation appends one node whose inputs precede it, so the node list
//! is already in topological order and the backward sweep is a single reverse
//! pass. A graph built with [`Graph::evaluation`] records values only and
//! cannot be differentiated.
//!
//! Shapes are never broadcast. Row batches are rank-2 `[rows × features]`
//! tensors; rank-1 tensors behave as a single row wherever an operation
//! accepts a batch.

use crate::error::{Result, TensorError};
use crate::tensor::{gemm, Mat, Tensor};

/// Handle to a node of one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Hadamard,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
    Relu,
    Exp,
}

/// Deliberate corruption of a backward rule. Only used as a negative control
/// for gradient checking.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BackwardFault {
    /// Multiplies the local sigmoid derivative by the given factor.
    SigmoidScale(f64),
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Linear(Var, Var),
    AddBias(Var, Var),
    Binary(Elementwise, Var, Var),
    Unary(Activation, Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    ScaleShift { x: Var, scale: f64 },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    Sum(Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, softmax: Tensor },
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Clone, Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<Var>,
    recording: bool,
    fault: Option<BackwardFault>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// A recording graph.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: Vec::new(),
            recording: true,
            fault: None,
        }
    }

    /// A value-only graph: no backward rules are stored.
    pub fn evaluation() -> Self {
        Graph {
            recording: false,
            ..Graph::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn inject_fault(&mut self, fault: BackwardFault) {
        self.fault = Some(fault);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Registers a trainable leaf; [`Graph::backward`] reports a gradient for it.
    pub fn param(&mut self, value: Tensor) -> Var {
        let v = self.push_raw(value, Op::Leaf, self.recording);
        self.params.push(v);
        v
    }

    /// Registers a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn params(&self) -> &[Var] {
        &self.params
    }

    /// Drops every node recorded after the first `len`. Vars pointing past
    /// the cut become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
        self.params.retain(|v| v.0 < len);
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let id = Var(self.nodes.len());
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        id
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = self.recording && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.push_raw(value, op, requires_grad)
    }

    /// Matrix product `[m×k] · [k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    /// Applies a weight matrix `[out × in]` to every row of `x`: `x · wᵀ`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        let (rows, k) = xv.as_matrix_dims();
        let (n, wk) = match wv.shape() {
            [n, wk] => (*n, *wk),
            _ => return Err(TensorError::shape("linear", xv.shape(), wv.shape())),
        };
        if xv.rank() > 2 || wk != k {
            return Err(TensorError::shape("linear", xv.shape(), wv.shape()));
        }
        let out_shape = if xv.rank() == 1 { vec![n] } else { vec![rows, n] };
        let mut out = vec![0.0; rows * n];
        gemm(
            Mat::row_major(xv.data(), rows, k),
            Mat::row_major(wv.data(), n, k).t(),
            &mut out,
            false,
        );
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(value, Op::Linear(x, w), &[x, w]))
    }

    /// Adds a bias vector to every row of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(b);
        let (_, cols) = xv.as_matrix_dims();
        if bv.rank() != 1 || bv.len() != cols || xv.rank() > 2 {
            return Err(TensorError::shape("add_bias", xv.shape(), bv.shape()));
        }
        let mut value = xv.clone();
        for row in value.data_mut().chunks_mut(cols) {
            for (v, b) in row.iter_mut().zip(bv.data()) {
                *v += b;
            }
        }
        Ok(self.push(value, Op::AddBias(x, b), &[x, b]))
    }

    pub fn elementwise(&mut self, kind: Elementwise, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let value = match kind {
            Elementwise::Add => av.zip_map(bv, "add", |x, y| x + y),
            Elementwise::Sub => av.zip_map(bv, "sub", |x, y| x - y),
            Elementwise::Hadamard => av.zip_map(bv, "hadamard", |x, y| x * y),
            Elementwise::Div => av.zip_map(bv, "div", |x, y| x / y),
        }?;
        Ok(self.push(value, Op::Binary(kind, a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Sub, a, b)
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Hadamard, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Div, a, b)
    }

    /// Sum of one or more equally shaped tensors, left to right.
    pub fn add_all(&mut self, xs: &[Var]) -> Result<Var> {
        let (&first, rest) = xs
            .split_first()
            .ok_or_else(|| TensorError::contract("add_all of an empty list"))?;
        rest.iter().try_fold(first, |acc, &x| self.add(acc, x))
    }

    pub fn activation(&mut self, kind: Activation, a: Var) -> Var {
        let av = self.value(a);
        let value = match kind {
            Activation::Sigmoid => av.map(sigmoid),
            Activation::Tanh => av.map(f64::tanh),
            Activation::Relu => av.map(|x| x.max(0.0)),
            Activation::Exp => av.map(f64::exp),
        };
        self.push(value, Op::Unary(kind, a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.activation(Activation::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.activation(Activation::Tanh, a)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.activation(Activation::Relu, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.activation(Activation::Exp, a)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the open interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(value, Op::Clamp { x: a, lo, hi }, &[a])
    }

    /// `scale · a + shift`.
    pub fn scale_shift(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let value = self.value(a).map(|x| scale * x + shift);
        self.push(value, Op::ScaleShift { x: a, scale }, &[a])
    }

    pub fn scale(&mut self, a: Var, scale: f64) -> Var {
        self.scale_shift(a, scale, 0.0)
    }

    /// `1 - a`.
    pub fn one_minus(&mut self, a: Var) -> Var {
        self.scale_shift(a, -1.0, 1.0)
    }

    /// Columns `start .. start + len` of every row.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = xv.as_matrix_dims();
        if start + len > cols || len == 0 || xv.rank() > 2 {
            return Err(TensorError::shape("slice_cols", xv.shape(), &[start, len]));
        }
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&xv.data()[r * cols + start..r * cols + start + len]);
        }
        let shape = if xv.rank() == 1 { vec![len] } else { vec![rows, len] };
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::SliceCols { x, start }, &[x]))
    }

    /// Row-wise concatenation along the feature axis.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| TensorError::contract("concat of an empty list"))?;
        let rank = self.value(first).rank();
        let (rows, _) = self.value(first).as_matrix_dims();
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let v = self.value(x);
            let (r, c) = v.as_matrix_dims();
            if v.rank() != rank || r != rows || rank > 2 {
                return Err(TensorError::shape("concat", self.shape(first), v.shape()));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&x, &w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(x).data()[r * w..(r + 1) * w]);
            }
        }
        let shape = if rank == 1 { vec![total] } else { vec![rows, total] };
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::ConcatCols(xs.to_vec()), xs))
    }

    /// Sum of all entries, as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a), &[a])
    }

    /// Summed negative log-softmax of the labelled entry of each row.
    pub fn cross_entropy_sum(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (rows, k) = lv.as_matrix_dims();
        if labels.len() != rows || lv.rank() > 2 {
            return Err(TensorError::contract(format!(
                "cross entropy: {} labels for logits {:?}",
                labels.len(),
                lv.shape()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(TensorError::contract(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        let mut softmax = lv.clone();
        let mut total = 0.0;
        for (row, &label) in softmax.data_mut().chunks_mut(k).zip(labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            total += z.ln() - (row[label].ln());
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            softmax,
        };
        Ok(self.push(Tensor::scalar(total), op, &[logits]))
    }

    /// Gradients of a scalar `loss` with respect to every registered parameter.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.recording {
            return Err(TensorError::contract("backward on a non-recording graph"));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::ones(self.shape(loss)));
        }
        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            self.backprop_node(i, &dy, &mut grads);
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(dy);
            }
        }
        let entries = self
            .params
            .iter()
            .map(|&p| {
                let g = grads
                    .get_mut(p.0)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Tensor::zeros(self.shape(p)));
                (p, g)
            })
            .collect();
        Ok(Gradients { entries })
    }

    fn grad_slot<'g>(&self, grads: &'g mut [Option<Tensor>], v: Var) -> Option<&'g mut [f64]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.shape(v)));
        }
        slot.as_mut().map(|t| t.data_mut())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, f: impl Fn(usize) -> f64) {
        if let Some(g) = self.grad_slot(grads, v) {
            for (j, gj) in g.iter_mut().enumerate() {
                *gj += f(j);
            }
        }
    }

    fn backprop_node(&self, i: usize, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let dy_d = dy.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).as_matrix_dims();
                let (_, n) = self.value(*b).as_matrix_dims();
                let dc = Mat::row_major(dy_d, m, n);
                let bv = Mat::row_major(self.value(*b).data(), k, n);
                let av = Mat::row_major(self.value(*a).data(), m, k);
                if let Some(g) = self.grad_slot(grads, *a) {
                    gemm(dc, bv.t(), g, true);
                }
                if let Some(g) = self.grad_slot(grads, *b) {
                    gemm(av.t(), dc, g, true);
                }
            }
            Op::Linear(x, w) => {
                let (rows, k) = self.value(*x).as_matrix_dims();
                let n = self.shape(*w)[0];
                let dyv = Mat::row_major(dy_d, rows, n);
                if let Some(g) = self.grad_slot(grads, *x) {
                    gemm(dyv, Mat::row_major(self.value(*w).data(), n, k), g, true);
                }
                if let Some(g) = self.grad_slot(grads, *w) {
                    gemm(dyv.t(), Mat::row_major(self.value(*x).data(), rows, k), g, true);
                }
            }
            Op::AddBias(x, b) => {
                self.accumulate(grads, *x, |j| dy_d[j]);
                if let Some(g) = self.grad_slot(grads, *b) {
                    let cols = g.len();
                    for row in dy_d.chunks(cols) {
                        for (gj, d) in g.iter_mut().zip(row) {
                            *gj += d;
                        }
                    }
                }
            }
            Op::Binary(kind, a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                match kind {
                    Elementwise::Add => {
                        self.accumulate(grads, *a, |j| dy_d[j]);
                        self.accumulate(grads, *b, |j| dy_d[j]);
                    }
                    Elementwise::Sub => {
                        self.accumulate(grads, *a, |j| dy_d[j]);
                        self.accumulate(grads, *b, |j| -dy_d[j]);
                    }
                    Elementwise::Hadamard => {
                        self.accumulate(grads, *a, |j| dy_d[j] * bv[j]);
                        self.accumulate(grads, *b, |j| dy_d[j] * av[j]);
                    }
                    Elementwise::Div => {
                        self.accumulate(grads, *a, |j| dy_d[j] / bv[j]);
                        self.accumulate(grads, *b, |j| -dy_d[j] * y[j] / bv[j]);
                    }
                }
            }
            Op::Unary(kind, a) => {
                let xv = self.value(*a).data();
                match kind {
                    Activation::Sigmoid => {
                        let fault = match self.fault {
                            Some(BackwardFault::SigmoidScale(s)) => s,
                            None => 1.0,
                        };
                        self.accumulate(grads, *a, |j| fault * dy_d[j] * y[j] * (1.0 - y[j]));
                    }
                    Activation::Tanh => {
                        self.accumulate(grads, *a, |j| dy_d[j] * (1.0 - y[j] * y[j]));
                    }
                    Activation::Relu => {
                        self.accumulate(grads, *a, |j| if xv[j] > 0.0 { dy_d[j] } else { 0.0 });
                    }
                    Activation::Exp => self.accumulate(grads, *a, |j| dy_d[j] * y[j]),
                }
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |j| {
                    if xv[j] > *lo && xv[j] < *hi {
                        dy_d[j]
                    } else {
                        0.0
                    }
                });
            }
            Op::ScaleShift { x, scale } => self.accumulate(grads, *x, |j| scale * dy_d[j]),
            Op::SliceCols { x, start } => {
                let (_, cols) = self.value(*x).as_matrix_dims();
                let (_, len) = node.value.as_matrix_dims();
                if let Some(g) = self.grad_slot(grads, *x) {
                    for (grow, drow) in g.chunks_mut(cols).zip(dy_d.chunks(len)) {
                        for (gj, d) in grow[*start..*start + len].iter_mut().zip(drow) {
                            *gj += d;
                        }
                    }
                }
            }
            Op::ConcatCols(xs) => {
                let (_, total) = node.value.as_matrix_dims();
                let mut offset = 0;
                for &x in xs {
                    let (_, w) = self.value(x).as_matrix_dims();
                    if let Some(g) = self.grad_slot(grads, x) {
                        for (grow, drow) in g.chunks_mut(w).zip(dy_d.chunks(total)) {
                            for (gj, d) in grow.iter_mut().zip(&drow[offset..offset + w]) {
                                *gj += d;
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::Sum(a) => {
                let d = dy_d[0];
                self.accumulate(grads, *a, |_| d);
            }
            Op::CrossEntropy {
                logits,
                labels,
                softmax,
            } => {
                let d = dy_d[0];
                let (_, k) = softmax.as_matrix_dims();
                let p = softmax.data();
                self.accumulate(grads, *logits, |j| {
                    let onehot = if labels[j / k] == j % k { 1.0 } else { 0.0 };
                    d * (p[j] - onehot)
                });
            }
        }
    }
}

/// Parameter gradients in registration order.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    entries: Vec<(Var, Tensor)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.entries.iter().find(|(p, _)| *p == v).map(|(_, g)| g)
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor)> {
        self.entries.iter().map(|(v, g)| (*v, g))
    }

    pub fn into_tensors(self) -> Vec<Tensor> {
        self.entries.into_iter().map(|(_, g)| g).collect()
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
