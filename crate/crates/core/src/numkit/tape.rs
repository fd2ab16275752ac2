//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation of one forward pass in creation order,
//! so node inputs always precede the node. [`Tape::backward`] walks the
//! record once in reverse and accumulates vector-Jacobian products. Nodes that
//! depend only on constants are never visited.

use std::collections::HashMap;

use super::{Gradients, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Lower clamp applied to cosine row norms and to `log` inputs.
pub const EPS: f64 = 1e-12;

/// Variance epsilon inside layer normalization.
pub const LN_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Operation kinds, used for reporting and for backward fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    Scale,
    AddScalar,
    DivScalar,
    Transpose,
    ConcatRows,
    ConcatCols,
    SliceRows,
    SliceCols,
    MeanRows,
    Sum,
    RowSums,
    Softmax,
    LogSoftmax,
    Cosine,
    Relu,
    Sigmoid,
    Log,
    LayerNorm,
}

impl OpKind {
    pub const DIFFERENTIABLE: [OpKind; 22] = [
        OpKind::MatMul,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::AddScalar,
        OpKind::DivScalar,
        OpKind::Transpose,
        OpKind::ConcatRows,
        OpKind::ConcatCols,
        OpKind::SliceRows,
        OpKind::SliceCols,
        OpKind::MeanRows,
        OpKind::Sum,
        OpKind::RowSums,
        OpKind::Softmax,
        OpKind::LogSoftmax,
        OpKind::Cosine,
        OpKind::Relu,
        OpKind::Sigmoid,
        OpKind::Log,
        OpKind::LayerNorm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::AddScalar => "add_scalar",
            OpKind::DivScalar => "div_scalar",
            OpKind::Transpose => "transpose",
            OpKind::ConcatRows => "concat_rows",
            OpKind::ConcatCols => "concat_cols",
            OpKind::SliceRows => "slice_rows",
            OpKind::SliceCols => "slice_cols",
            OpKind::MeanRows => "mean_rows",
            OpKind::Sum => "sum",
            OpKind::RowSums => "row_sums",
            OpKind::Softmax => "softmax_rows",
            OpKind::LogSoftmax => "log_softmax_rows",
            OpKind::Cosine => "cosine_rows",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Log => "log",
            OpKind::LayerNorm => "layer_norm_rows",
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    DivScalar(Var, Var),
    Transpose(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    MeanRows(Var),
    Sum(Var),
    RowSums(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Cosine(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Log(Var),
    LayerNorm(Var, Var, Var),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::DivScalar(..) => OpKind::DivScalar,
            Op::Transpose(..) => OpKind::Transpose,
            Op::ConcatRows(..) => OpKind::ConcatRows,
            Op::ConcatCols(..) => OpKind::ConcatCols,
            Op::SliceRows(..) => OpKind::SliceRows,
            Op::SliceCols(..) => OpKind::SliceCols,
            Op::MeanRows(..) => OpKind::MeanRows,
            Op::Sum(..) => OpKind::Sum,
            Op::RowSums(..) => OpKind::RowSums,
            Op::Softmax(..) => OpKind::Softmax,
            Op::LogSoftmax(..) => OpKind::LogSoftmax,
            Op::Cosine(..) => OpKind::Cosine,
            Op::Relu(..) => OpKind::Relu,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::Log(..) => OpKind::Log,
            Op::LayerNorm(..) => OpKind::LayerNorm,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::DivScalar(a, b)
            | Op::Cosine(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Transpose(a)
            | Op::SliceRows(a, _)
            | Op::SliceCols(a, _)
            | Op::MeanRows(a)
            | Op::Sum(a)
            | Op::RowSums(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Log(a) => vec![*a],
            Op::ConcatRows(parts) | Op::ConcatCols(parts) => parts.clone(),
            Op::LayerNorm(x, g, b) => vec![*x, *g, *b],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    param: Option<ParamId>,
    requires_grad: bool,
}

/// One forward pass worth of recorded operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    fault: Option<OpKind>,
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension {
            op,
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Flip the sign of every gradient produced by `kind`'s backward rule.
    /// Exists so the gradient checker can be shown to catch broken rules.
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    /// Smallest `|x|` over every relu input recorded so far, or infinity
    /// when there is none. Finite differences are only trustworthy when this
    /// exceeds the step by a comfortable margin.
    pub fn relu_margin(&self) -> f64 {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(a) => Some(&self.nodes[a.0].value),
                _ => None,
            })
            .flat_map(|t| t.data().iter().map(|x| x.abs()))
            .fold(f64::INFINITY, f64::min)
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

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            param: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            param: None,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf for a learnable tensor. Repeated calls with the same id share one node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: store.get(id).clone(),
            op: Op::Leaf,
            param: Some(id),
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("add", self.value(a), self.value(b))?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("sub", self.value(a), self.value(b))?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(value, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("mul", self.value(a), self.value(b))?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x * s);
        self.push(value, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x + s);
        self.push(value, Op::AddScalar(a))
    }

    /// `a / s` for a 1×1 `s`.
    pub fn div_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.shape(s) != (1, 1) {
            return Err(Error::Dimension {
                op: "div_scalar",
                left: self.shape(a),
                right: self.shape(s),
            });
        }
        let d = self.value(s).item();
        let value = self.value(a).map(|x| x / d);
        Ok(self.push(value, Op::DivScalar(a, s)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&v| self.value(v)).collect();
        let value = Tensor::concat_rows(&values)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&v| self.value(v)).collect();
        let value = Tensor::concat_cols(&values)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.shape(a);
        if start + len > rows {
            return Err(Error::Dimension {
                op: "slice_rows",
                left: (rows, cols),
                right: (start + len, cols),
            });
        }
        let value = self.value(a).slice_rows(start, len);
        Ok(self.push(value, Op::SliceRows(a, start)))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.shape(a);
        if start + len > cols {
            return Err(Error::Dimension {
                op: "slice_cols",
                left: (rows, cols),
                right: (rows, start + len),
            });
        }
        let value = self.value(a).slice_cols(start, len);
        Ok(self.push(value, Op::SliceCols(a, start)))
    }

    /// Column means: m×n → 1×n.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = Tensor::zeros(1, x.cols());
        for r in 0..x.rows() {
            for (o, v) in out.data_mut().iter_mut().zip(x.row(r)) {
                *o += v;
            }
        }
        let m = x.rows() as f64;
        out.data_mut().iter_mut().for_each(|o| *o /= m);
        self.push(out, Op::MeanRows(a))
    }

    /// Sum of all entries as a 1×1 tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a))
    }

    /// Per-row sums: m×n → m×1.
    pub fn row_sums(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let data = (0..x.rows()).map(|r| x.row(r).iter().sum()).collect();
        let value = Tensor::from_vec(x.rows(), 1, data).expect("shape");
        self.push(value, Op::RowSums(a))
    }

    /// Row-wise softmax, stabilized by subtracting each row's maximum.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        self.push(out, Op::Softmax(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        self.push(out, Op::LogSoftmax(a))
    }

    /// Pairwise cosine similarity between rows of `a` (m×d) and `b` (n×d).
    /// Row norms below [`EPS`] are clamped to it.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.cols() != y.cols() {
            return Err(Error::Dimension {
                op: "cosine_rows",
                left: x.shape(),
                right: y.shape(),
            });
        }
        let xn = normalize_rows(x).0;
        let yn = normalize_rows(y).0;
        let value = xn.matmul_nt(&yn);
        Ok(self.push(value, Op::Cosine(a, b)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push(value, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    /// Natural log with the input clamped below at [`EPS`]; zero gradient where clamped.
    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(EPS).ln());
        self.push(value, Op::Log(a))
    }

    /// Per-row layer normalization with 1×d `gain` and `bias`.
    pub fn layer_norm_rows(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let cols = self.shape(x).1;
        for v in [gain, bias] {
            if self.shape(v) != (1, cols) {
                return Err(Error::Dimension {
                    op: "layer_norm_rows",
                    left: self.shape(x),
                    right: self.shape(v),
                });
            }
        }
        let (xhat, _) = layer_norm_stats(self.value(x));
        let (g, b) = (self.value(gain), self.value(bias));
        let mut out = xhat;
        for r in 0..out.rows() {
            for ((o, gv), bv) in out.row_mut(r).iter_mut().zip(g.data()).zip(b.data()) {
                *o = *o * gv + bv;
            }
        }
        Ok(self.push(out, Op::LayerNorm(x, gain, bias)))
    }

    /// Accumulate gradients of the 1×1 `loss` into every parameter leaf.
    pub fn backward(&self, loss: Var, store: &ParamStore) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a 1x1 loss, got {:?}",
                self.shape(loss)
            )));
        }
        let mut out = Gradients::zeros_like(store);
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Some(id) = node.param {
                out.grads[id.0].add_assign(&g);
                continue;
            }
            let negate = self.fault == Some(node.op.kind());
            let mut emit = |v: Var, mut contrib: Tensor| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                if negate {
                    contrib.data_mut().iter_mut().for_each(|x| *x = -*x);
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            };
            self.vjp(node, &g, &mut emit);
        }
        Ok(out)
    }

    fn vjp(&self, node: &Node, g: &Tensor, emit: &mut impl FnMut(Var, Tensor)) {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if wants(*a) {
                    emit(*a, g.matmul_nt(val(*b)));
                }
                if wants(*b) {
                    emit(*b, val(*a).matmul_tn(g));
                }
            }
            Op::Add(a, b) => {
                emit(*a, g.clone());
                emit(*b, g.clone());
            }
            Op::Sub(a, b) => {
                emit(*a, g.clone());
                emit(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    emit(*a, g.zip_map(val(*b), |x, y| x * y));
                }
                if wants(*b) {
                    emit(*b, g.zip_map(val(*a), |x, y| x * y));
                }
            }
            Op::Scale(a, s) => emit(*a, g.map(|x| x * s)),
            Op::AddScalar(a) => emit(*a, g.clone()),
            Op::DivScalar(a, s) => {
                let d = val(*s).item();
                emit(*a, g.map(|x| x / d));
                if wants(*s) {
                    let dot: f64 = g
                        .data()
                        .iter()
                        .zip(val(*a).data())
                        .map(|(x, y)| x * y)
                        .sum();
                    emit(*s, Tensor::scalar(-dot / (d * d)));
                }
            }
            Op::Transpose(a) => emit(*a, g.transpose()),
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let rows = val(p).rows();
                    if wants(p) {
                        emit(p, g.slice_rows(start, rows));
                    }
                    start += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let cols = val(p).cols();
                    if wants(p) {
                        emit(p, g.slice_cols(start, cols));
                    }
                    start += cols;
                }
            }
            Op::SliceRows(a, start) => {
                let src = val(*a);
                let mut d = Tensor::zeros(src.rows(), src.cols());
                let off = start * src.cols();
                d.data_mut()[off..off + g.len()].copy_from_slice(g.data());
                emit(*a, d);
            }
            Op::SliceCols(a, start) => {
                let src = val(*a);
                let mut d = Tensor::zeros(src.rows(), src.cols());
                for r in 0..src.rows() {
                    d.row_mut(r)[*start..start + g.cols()].copy_from_slice(g.row(r));
                }
                emit(*a, d);
            }
            Op::MeanRows(a) => {
                let src = val(*a);
                let m = src.rows() as f64;
                let mut d = Tensor::zeros(src.rows(), src.cols());
                for r in 0..src.rows() {
                    for (o, gv) in d.row_mut(r).iter_mut().zip(g.data()) {
                        *o = gv / m;
                    }
                }
                emit(*a, d);
            }
            Op::Sum(a) => {
                let src = val(*a);
                emit(*a, Tensor::full(src.rows(), src.cols(), g.item()));
            }
            Op::RowSums(a) => {
                let src = val(*a);
                let mut d = Tensor::zeros(src.rows(), src.cols());
                for r in 0..src.rows() {
                    let gr = g.get(r, 0);
                    d.row_mut(r).iter_mut().for_each(|o| *o = gr);
                }
                emit(*a, d);
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let mut d = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for ((o, p), q) in d.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = p * (q - dot);
                    }
                }
                emit(*a, d);
            }
            Op::LogSoftmax(a) => {
                let y = &node.value;
                let mut d = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let total: f64 = gr.iter().sum();
                    for ((o, ly), q) in d.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = q - ly.exp() * total;
                    }
                }
                emit(*a, d);
            }
            Op::Cosine(a, b) => {
                let c = &node.value;
                if wants(*a) {
                    emit(*a, cosine_vjp(val(*a), val(*b), c, g));
                }
                if wants(*b) {
                    emit(
                        *b,
                        cosine_vjp(val(*b), val(*a), &c.transpose(), &g.transpose()),
                    );
                }
            }
            Op::Relu(a) => emit(*a, g.zip_map(val(*a), |q, x| if x > 0.0 { q } else { 0.0 })),
            Op::Sigmoid(a) => emit(*a, g.zip_map(&node.value, |q, y| q * y * (1.0 - y))),
            Op::Log(a) => emit(
                *a,
                g.zip_map(val(*a), |q, x| if x > EPS { q / x } else { 0.0 }),
            ),
            Op::LayerNorm(x, gain, bias) => {
                let (xhat, inv_std) = layer_norm_stats(val(*x));
                let gv = val(*gain);
                let n = xhat.cols() as f64;
                if wants(*x) {
                    let mut d = Tensor::zeros(xhat.rows(), xhat.cols());
                    for r in 0..xhat.rows() {
                        let dxhat: Vec<f64> =
                            g.row(r).iter().zip(gv.data()).map(|(q, w)| q * w).collect();
                        let s1: f64 = dxhat.iter().sum();
                        let s2: f64 = dxhat.iter().zip(xhat.row(r)).map(|(p, h)| p * h).sum();
                        for ((o, p), h) in d.row_mut(r).iter_mut().zip(&dxhat).zip(xhat.row(r)) {
                            *o = inv_std[r] / n * (n * p - s1 - h * s2);
                        }
                    }
                    emit(*x, d);
                }
                if wants(*gain) {
                    let mut dg = Tensor::zeros(1, xhat.cols());
                    for r in 0..xhat.rows() {
                        for ((o, q), h) in dg.data_mut().iter_mut().zip(g.row(r)).zip(xhat.row(r)) {
                            *o += q * h;
                        }
                    }
                    emit(*gain, dg);
                }
                if wants(*bias) {
                    let mut db = Tensor::zeros(1, xhat.cols());
                    for r in 0..g.rows() {
                        for (o, q) in db.data_mut().iter_mut().zip(g.row(r)) {
                            *o += q;
                        }
                    }
                    emit(*bias, db);
                }
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Rows scaled to unit length, with norms clamped at [`EPS`]. Also returns
/// the clamped norms and whether each was clamped.
fn normalize_rows(x: &Tensor) -> (Tensor, Vec<(f64, bool)>) {
    let mut out = x.clone();
    let mut norms = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let raw = x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        let clamped = raw < EPS;
        let n = if clamped { EPS } else { raw };
        out.row_mut(r).iter_mut().for_each(|v| *v /= n);
        norms.push((n, clamped));
    }
    (out, norms)
}

/// Gradient of `cos(x, y)` w.r.t. `x`, given output `c` and upstream `g`.
fn cosine_vjp(x: &Tensor, y: &Tensor, c: &Tensor, g: &Tensor) -> Tensor {
    let (xn, xnorms) = normalize_rows(x);
    let yn = normalize_rows(y).0;
    // Σ_j g_ij ŷ_j
    let mut d = g.matmul(&yn).expect("cosine shapes");
    for (r, &(n, clamped)) in xnorms.iter().enumerate() {
        let gc: f64 = if clamped {
            0.0
        } else {
            g.row(r).iter().zip(c.row(r)).map(|(p, q)| p * q).sum()
        };
        for (o, h) in d.row_mut(r).iter_mut().zip(xn.row(r)) {
            *o = (*o - gc * h) / n;
        }
    }
    d
}

fn layer_norm_stats(x: &Tensor) -> (Tensor, Vec<f64>) {
    let n = x.cols() as f64;
    let mut xhat = x.clone();
    let mut inv = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = xhat.row_mut(r);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv_std = 1.0 / (var + LN_EPS).sqrt();
        row.iter_mut().for_each(|v| *v = (*v - mean) * inv_std);
        inv.push(inv_std);
    }
    (xhat, inv)
}
