//! Dense row-major `f64` tensors and a reverse-mode tape.
//!
//! A [`Graph`] records every operation whose inputs require gradients. Values
//! are stored by the graph and referenced through [`Var`] handles, so the
//! tape is a plain `Vec` in execution order and [`Graph::backward`] is a
//! single reverse sweep over it.
//!
//! Broadcasting is limited to scalar-with-tensor for the elementwise ops;
//! row biases are expressed as `ones(B×1) · b(1×n)` through [`Graph::matmul`].

use std::sync::Arc;

use rand::Rng;
use thiserror::Error;

/// Floor applied to probabilities before taking logs in the loss kernels.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    BadLength { shape: Vec<usize>, len: usize },
    #[error("log of non-positive value {0}")]
    DomainError(f64),
    #[error("dropout rate {0} outside [0, 1)")]
    InvalidRate(f64),
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
}

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::BadLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::filled(shape, 1.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a 2-D tensor from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "from_rows",
                    lhs: vec![cols],
                    rhs: vec![row.len()],
                });
            }
            data.extend_from_slice(row);
        }
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Number of rows when viewed as `(product of leading dims) × last_dim`.
    pub fn rows(&self) -> usize {
        self.data.len().checked_div(self.last_dim()).unwrap_or(0)
    }
}

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Train or eval behaviour for stochastic layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
    SoftmaxLastDim,
    Log,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Concat(Vec<Var>),
    Slice { x: Var, start: usize },
    Sigmoid(Var),
    Tanh(Var),
    Softmax(Var),
    Log(Var),
    Dropout { x: Var, mask: Vec<f64> },
    Sum(Var),
    BinaryCrossEntropy {
        probs: Var,
        targets: Vec<f64>,
        row_weights: Vec<f64>,
        norm: f64,
    },
    CategoricalNll {
        probs: Var,
        targets: Vec<f64>,
        row_weights: Vec<f64>,
        norm: f64,
    },
    QuadPenalty {
        x: Var,
        anchor: Arc<Vec<f64>>,
        weight: Arc<Vec<f64>>,
        offset: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Computation tape. Confined to one thread; build a fresh graph per step.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn shape_of(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// `a (m×k) · b (k×n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape_of(a), self.shape_of(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor { shape: vec![m, n], data: out }, Op::MatMul(a, b), rg))
    }

    fn elementwise(
        &mut self,
        a: Var,
        b: Var,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Ok(Tensor { shape: ta.shape.clone(), data })
        } else if tb.is_scalar() && tb.shape().len() <= 1 {
            let y = tb.item();
            let data = ta.data().iter().map(|&x| f(x, y)).collect();
            Ok(Tensor { shape: ta.shape.clone(), data })
        } else if ta.is_scalar() && ta.shape().len() <= 1 {
            let x = ta.item();
            let data = tb.data().iter().map(|&y| f(x, y)).collect();
            Ok(Tensor { shape: tb.shape.clone(), data })
        } else {
            Err(TensorError::ShapeMismatch {
                op,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            })
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.elementwise(a, b, "add", |x, y| x + y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.elementwise(a, b, "sub", |x, y| x - y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.elementwise(a, b, "mul", |x, y| x * y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let t = self.value(a);
        let value = Tensor {
            shape: t.shape.clone(),
            data: t.data().iter().map(|x| x * factor).collect(),
        };
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Scale(a, factor), rg)
    }

    /// Concatenates along the last dimension; leading dimensions must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(TensorError::ShapeMismatch {
            op: "concat_last",
            lhs: vec![],
            rhs: vec![],
        })?;
        let lead = self.shape_of(*first);
        let lead = lead[..lead.len().saturating_sub(1)].to_vec();
        let mut width = 0;
        for p in parts {
            let s = self.shape_of(*p);
            if s.len() != lead.len() + 1 || s[..lead.len()] != lead[..] {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_last",
                    lhs: self.shape_of(*first).to_vec(),
                    rhs: s.to_vec(),
                });
            }
            width += s[s.len() - 1];
        }
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for p in parts {
                let t = self.value(*p);
                let w = t.last_dim();
                data.extend_from_slice(&t.data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(width);
        let rg = self.any_grad(parts);
        Ok(self.push(Tensor { shape, data }, Op::Concat(parts.to_vec()), rg))
    }

    /// Columns `start..end` of the last dimension.
    pub fn slice_last(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        let w = t.last_dim();
        if start > end || end > w || t.shape().is_empty() {
            return Err(TensorError::ShapeMismatch {
                op: "slice_last",
                lhs: t.shape().to_vec(),
                rhs: vec![start, end],
            });
        }
        let rows = t.rows();
        let mut data = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            data.extend_from_slice(&t.data()[r * w + start..r * w + end]);
        }
        let mut shape = t.shape().to_vec();
        *shape.last_mut().unwrap() = end - start;
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor { shape, data }, Op::Slice { x, start }, rg))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        match kind {
            Activation::Sigmoid => Ok(self.sigmoid(x)),
            Activation::Tanh => Ok(self.tanh(x)),
            Activation::SoftmaxLastDim => Ok(self.softmax_last(x)),
            Activation::Log => self.log(x),
        }
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor {
            shape: t.shape.clone(),
            data: t.data().iter().map(|&v| sigmoid(v)).collect(),
        };
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Sigmoid(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor {
            shape: t.shape.clone(),
            data: t.data().iter().map(|v| v.tanh()).collect(),
        };
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Tanh(x), rg)
    }

    pub fn softmax_last(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let w = t.last_dim();
        let mut data = t.data().to_vec();
        if w > 0 {
            for row in data.chunks_mut(w) {
                softmax_in_place(row);
            }
        }
        let value = Tensor { shape: t.shape.clone(), data };
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Softmax(x), rg)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if let Some(&bad) = t.data().iter().find(|v| !(**v > 0.0)) {
            return Err(TensorError::DomainError(bad));
        }
        let value = Tensor {
            shape: t.shape.clone(),
            data: t.data().iter().map(|v| v.ln()).collect(),
        };
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Log(x), rg))
    }

    /// Inverted dropout. Eval mode and rate 0 return `x` unchanged.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::InvalidRate(rate));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let t = self.value(x);
        let mask: Vec<f64> = (0..t.len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let value = Tensor {
            shape: t.shape.clone(),
            data: t.data().iter().zip(&mask).map(|(v, m)| v * m).collect(),
        };
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Dropout { x, mask }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(total), Op::Sum(x), rg)
    }

    /// `−Σ_r w_r Σ_c [y log p + (1−y) log(1−p)] / norm` with both log
    /// arguments floored at [`PROB_FLOOR`].
    ///
    /// `probs` is viewed as rows × last dim; `targets` has the same length and
    /// `row_weights` one entry per row.
    pub fn binary_cross_entropy(
        &mut self,
        probs: Var,
        targets: &[f64],
        row_weights: &[f64],
        norm: f64,
    ) -> Result<Var> {
        let t = self.value(probs);
        check_loss_shapes(t, targets, row_weights, "binary_cross_entropy")?;
        let value = bce_sum(t.data(), targets, row_weights, t.last_dim()) / norm;
        let rg = self.any_grad(&[probs]);
        Ok(self.push(
            Tensor::scalar(value),
            Op::BinaryCrossEntropy {
                probs,
                targets: targets.to_vec(),
                row_weights: row_weights.to_vec(),
                norm,
            },
            rg,
        ))
    }

    /// `−Σ_r w_r Σ_c y log p / norm`, floored like [`Graph::binary_cross_entropy`].
    pub fn categorical_nll(
        &mut self,
        probs: Var,
        targets: &[f64],
        row_weights: &[f64],
        norm: f64,
    ) -> Result<Var> {
        let t = self.value(probs);
        check_loss_shapes(t, targets, row_weights, "categorical_nll")?;
        let width = t.last_dim();
        let mut total = 0.0;
        for (r, (row, ys)) in t.data().chunks(width).zip(targets.chunks(width)).enumerate() {
            let w = row_weights[r];
            if w == 0.0 {
                continue;
            }
            let s: f64 = row.iter().zip(ys).map(|(&p, &y)| y * p.max(PROB_FLOOR).ln()).sum();
            total -= w * s;
        }
        let rg = self.any_grad(&[probs]);
        Ok(self.push(
            Tensor::scalar(total / norm),
            Op::CategoricalNll {
                probs,
                targets: targets.to_vec(),
                row_weights: row_weights.to_vec(),
                norm,
            },
            rg,
        ))
    }

    /// `½ Σ_i w_i (x_i − a_i)²` where `a` and `w` are read from the shared
    /// buffers starting at `offset`.
    pub fn quad_penalty(
        &mut self,
        x: Var,
        anchor: Arc<Vec<f64>>,
        weight: Arc<Vec<f64>>,
        offset: usize,
    ) -> Result<Var> {
        let t = self.value(x);
        let n = t.len();
        if offset + n > anchor.len() || offset + n > weight.len() {
            return Err(TensorError::ShapeMismatch {
                op: "quad_penalty",
                lhs: vec![offset + n],
                rhs: vec![anchor.len().min(weight.len())],
            });
        }
        let a = &anchor[offset..offset + n];
        let w = &weight[offset..offset + n];
        let mut total = 0.0;
        for i in 0..n {
            let d = t.data()[i] - a[i];
            total += 0.5 * w[i] * d * d;
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::scalar(total),
            Op::QuadPenalty {
                x,
                anchor,
                weight,
                offset,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Leaf gradients accumulate across
    /// calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut leaf_grads: Vec<(usize, Vec<f64>)> = Vec::new();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let out = &node.value;
            match &node.op {
                Op::Leaf => leaf_grads.push((idx, g)),
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                    if self.requires_grad(*a) {
                        let mut da = vec![0.0; m * k];
                        matmul_a_bt(&g, tb.data(), m, n, k, &mut da);
                        accumulate(&mut grads, *a, da);
                    }
                    if self.requires_grad(*b) {
                        let mut db = vec![0.0; k * n];
                        matmul_at_b(ta.data(), &g, m, k, n, &mut db);
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::Add(a, b) => {
                    self.elementwise_back(&mut grads, *a, &g, |_| 1.0);
                    self.elementwise_back(&mut grads, *b, &g, |_| 1.0);
                }
                Op::Sub(a, b) => {
                    self.elementwise_back(&mut grads, *a, &g, |_| 1.0);
                    self.elementwise_back(&mut grads, *b, &g, |_| -1.0);
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let other = |t: &Tensor, i: usize| if t.is_scalar() { t.item() } else { t.data()[i] };
                    self.elementwise_back(&mut grads, *a, &g, |i| other(tb, i));
                    self.elementwise_back(&mut grads, *b, &g, |i| other(ta, i));
                }
                Op::Scale(a, f) => {
                    if self.requires_grad(*a) {
                        accumulate(&mut grads, *a, g.iter().map(|x| x * f).collect());
                    }
                }
                Op::Concat(parts) => {
                    let rows = out.rows();
                    let width = out.last_dim();
                    let mut col = 0;
                    for p in parts {
                        let w = self.value(*p).last_dim();
                        if self.requires_grad(*p) {
                            let mut d = Vec::with_capacity(rows * w);
                            for r in 0..rows {
                                d.extend_from_slice(&g[r * width + col..r * width + col + w]);
                            }
                            accumulate(&mut grads, *p, d);
                        }
                        col += w;
                    }
                }
                Op::Slice { x, start } => {
                    if self.requires_grad(*x) {
                        let tx = self.value(*x);
                        let w = tx.last_dim();
                        let sw = out.last_dim();
                        let mut d = vec![0.0; tx.len()];
                        for r in 0..out.rows() {
                            d[r * w + start..r * w + start + sw]
                                .copy_from_slice(&g[r * sw..(r + 1) * sw]);
                        }
                        accumulate(&mut grads, *x, d);
                    }
                }
                Op::Sigmoid(x) => {
                    if self.requires_grad(*x) {
                        let d = g.iter().zip(out.data()).map(|(g, y)| g * y * (1.0 - y)).collect();
                        accumulate(&mut grads, *x, d);
                    }
                }
                Op::Tanh(x) => {
                    if self.requires_grad(*x) {
                        let d = g.iter().zip(out.data()).map(|(g, y)| g * (1.0 - y * y)).collect();
                        accumulate(&mut grads, *x, d);
                    }
                }
                Op::Softmax(x) => {
                    if self.requires_grad(*x) {
                        let w = out.last_dim();
                        let mut d = vec![0.0; out.len()];
                        for ((dr, gr), yr) in d.chunks_mut(w).zip(g.chunks(w)).zip(out.data().chunks(w)) {
                            let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                            for ((dv, gv), yv) in dr.iter_mut().zip(gr).zip(yr) {
                                *dv = yv * (gv - dot);
                            }
                        }
                        accumulate(&mut grads, *x, d);
                    }
                }
                Op::Log(x) => {
                    if self.requires_grad(*x) {
                        let tx = self.value(*x);
                        let d = g.iter().zip(tx.data()).map(|(g, v)| g / v).collect();
                        accumulate(&mut grads, *x, d);
                    }
                }
                Op::Dropout { x, mask } => {
                    if self.requires_grad(*x) {
                        let d = g.iter().zip(mask).map(|(g, m)| g * m).collect();
                        accumulate(&mut grads, *x, d);
                    }
                }
                Op::Sum(x) => {
                    if self.requires_grad(*x) {
                        let n = self.value(*x).len();
                        accumulate(&mut grads, *x, vec![g[0]; n]);
                    }
                }
                Op::BinaryCrossEntropy {
                    probs,
                    targets,
                    row_weights,
                    norm,
                } => {
                    if self.requires_grad(*probs) {
                        let tp = self.value(*probs);
                        let w = tp.last_dim();
                        let scale = g[0] / norm;
                        let mut d = vec![0.0; tp.len()];
                        for (i, (&p, &y)) in tp.data().iter().zip(targets).enumerate() {
                            let rw = row_weights[i / w];
                            if rw == 0.0 {
                                continue;
                            }
                            let mut dl = 0.0;
                            if p > PROB_FLOOR {
                                dl += y / p;
                            }
                            if 1.0 - p > PROB_FLOOR {
                                dl -= (1.0 - y) / (1.0 - p);
                            }
                            d[i] = -scale * rw * dl;
                        }
                        accumulate(&mut grads, *probs, d);
                    }
                }
                Op::CategoricalNll {
                    probs,
                    targets,
                    row_weights,
                    norm,
                } => {
                    if self.requires_grad(*probs) {
                        let tp = self.value(*probs);
                        let w = tp.last_dim();
                        let scale = g[0] / norm;
                        let mut d = vec![0.0; tp.len()];
                        for (i, (&p, &y)) in tp.data().iter().zip(targets).enumerate() {
                            let rw = row_weights[i / w];
                            if rw != 0.0 && p > PROB_FLOOR {
                                d[i] = -scale * rw * y / p;
                            }
                        }
                        accumulate(&mut grads, *probs, d);
                    }
                }
                Op::QuadPenalty {
                    x,
                    anchor,
                    weight,
                    offset,
                } => {
                    if self.requires_grad(*x) {
                        let tx = self.value(*x);
                        let n = tx.len();
                        let a = &anchor[*offset..*offset + n];
                        let wt = &weight[*offset..*offset + n];
                        let d = (0..n).map(|i| g[0] * wt[i] * (tx.data()[i] - a[i])).collect();
                        accumulate(&mut grads, *x, d);
                    }
                }
            }
        }

        for (idx, g) in leaf_grads {
            let node = &mut self.nodes[idx];
            match &mut node.grad {
                Some(existing) => existing.iter_mut().zip(&g).for_each(|(e, v)| *e += v),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    /// Pushes `g ⊙ local(i)` to `target`, reducing when `target` was a
    /// broadcast scalar.
    fn elementwise_back(
        &self,
        grads: &mut [Option<Vec<f64>>],
        target: Var,
        g: &[f64],
        local: impl Fn(usize) -> f64,
    ) {
        if !self.requires_grad(target) {
            return;
        }
        let t = self.value(target);
        if t.len() == g.len() {
            accumulate(grads, target, g.iter().enumerate().map(|(i, gv)| gv * local(i)).collect());
        } else {
            let s: f64 = g.iter().enumerate().map(|(i, gv)| gv * local(i)).sum();
            accumulate(grads, target, vec![s]);
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, contribution: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => existing.iter_mut().zip(&contribution).for_each(|(e, c)| *e += c),
        slot @ None => *slot = Some(contribution),
    }
}

fn check_loss_shapes(t: &Tensor, targets: &[f64], row_weights: &[f64], op: &'static str) -> Result<()> {
    if t.len() != targets.len() || t.rows() != row_weights.len() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: t.shape().to_vec(),
            rhs: vec![targets.len(), row_weights.len()],
        });
    }
    Ok(())
}

pub(crate) fn bce_sum(probs: &[f64], targets: &[f64], row_weights: &[f64], width: usize) -> f64 {
    let mut total = 0.0;
    for (r, (row, ys)) in probs.chunks(width).zip(targets.chunks(width)).enumerate() {
        let w = row_weights[r];
        if w == 0.0 {
            continue;
        }
        let s: f64 = row
            .iter()
            .zip(ys)
            .map(|(&p, &y)| y * p.max(PROB_FLOOR).ln() + (1.0 - y) * (1.0 - p).max(PROB_FLOOR).ln())
            .sum();
        total -= w * s;
    }
    total
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// `out (m×n) = a (m×k) · b (k×n)`; zero entries of `a` are skipped, which
/// matters for the mostly-zero one-hot and mask columns.
pub fn matmul_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out (m×k) = g (m×n) · bᵀ` where `b` is `k×n`.
fn matmul_a_bt(g: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
}

/// `out (k×n) = aᵀ · g` where `a` is `m×k` and `g` is `m×n`.
fn matmul_at_b(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}
