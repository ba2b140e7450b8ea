//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every primitive operation together with its value.
//! Nodes are appended in evaluation order, so the tape is topologically sorted
//! by construction and [`Graph::backward`] is a single reverse sweep.
//!
//! Only nodes that depend on a variable are differentiated; constants (leaked
//! gradients, frozen target weights) cost nothing in the backward pass.
//!
//! The op set is closed under differentiation: every derivative rule is itself
//! expressible with primitives in this file (`relu'` is [`OpKind::Step`], a
//! convolution's adjoints are [`OpKind::ConvTranspose`] and
//! [`OpKind::ConvWeightGrad`]). Model code uses that to write a network's
//! parameter gradient *into* a graph, which is what gradient matching
//! differentiates.

use super::kernels::{self, ConvGeom};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive operation kinds with their static attributes.
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    /// `[m,k] · [k,n]`
    MatMul,
    /// Rank-2 transpose.
    Transpose,
    /// `x [n,c,h,w]` ⋆ `w [o,c,kh,kw]`
    Conv2d { stride: usize, pad: usize },
    /// Adjoint of `Conv2d` in its input: `(gy [n,o,oh,ow], w [o,c,kh,kw]) -> [n,c,h,w]`.
    /// Doubles as a transposed convolution.
    ConvTranspose { stride: usize, pad: usize, out_hw: (usize, usize) },
    /// Adjoint of `Conv2d` in its kernel: `(x, gy) -> [o,c,kh,kw]`.
    ConvWeightGrad { stride: usize, pad: usize, kernel_hw: (usize, usize) },
    /// Elementwise sum of equal shapes.
    Add,
    Sub,
    Mul,
    Div,
    /// `alpha * x + beta`.
    Affine { alpha: f64, beta: f64 },
    /// `x + b` broadcast over every axis except axis 1.
    AddBias,
    Relu,
    /// Heaviside step `x > 0`; zero derivative.
    Step,
    Sigmoid,
    Tanh,
    LeakyRelu { alpha: f64 },
    /// Derivative of `LeakyRelu`: `1` where `x > 0`, `alpha` elsewhere; zero derivative.
    LeakyStep { alpha: f64 },
    Sqrt,
    /// Row-wise softmax of a rank-2 tensor.
    Softmax,
    /// Mean cross-entropy of rank-2 logits against class indices; scalar.
    SoftmaxCrossEntropy { labels: Vec<usize> },
    /// Mean squared difference; scalar.
    Mse,
    /// Isotropic total variation of a `[b,c,h,w]` batch; scalar.
    TotalVariation,
    Reshape { shape: Vec<usize> },
    /// Rows `start..start+len` of the leading axis.
    Slice { start: usize, len: usize },
    /// Column-wise concatenation of two rank-2 tensors with equal row counts.
    ConcatCols,
    Sum,
    Mean,
    /// Sums every axis except axis 1.
    SumToBias,
}

#[derive(Clone, Debug)]
enum Source {
    Variable,
    Constant,
    Op { kind: OpKind, inputs: Vec<NodeId> },
}

#[derive(Clone, Debug)]
struct Node {
    source: Source,
    value: Tensor,
    requires_grad: bool,
}

/// An append-only computation tape.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Result of [`Graph::backward`]: one gradient per differentiable node.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `id`; zeros when the loss does not depend on it.
    pub fn get(&self, id: NodeId) -> Tensor {
        match self.grads.get(id.0).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[id.0]),
        }
    }

    pub fn take(&mut self, id: NodeId) -> Tensor {
        match self.grads.get_mut(id.0).and_then(|g| g.take()) {
            Some(g) => g,
            None => Tensor::zeros(&self.shapes[id.0]),
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a differentiable leaf.
    pub fn variable(&mut self, value: Tensor) -> NodeId {
        self.push(Source::Variable, value, true)
    }

    /// Adds a leaf that is never differentiated.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Source::Constant, value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Ids of all variable leaves in creation order.
    pub fn variables(&self) -> Vec<NodeId> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.source, Source::Variable))
            .map(|(i, _)| NodeId(i))
            .collect()
    }

    fn push(&mut self, source: Source, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { source, value, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    /// Evaluates `kind` on `inputs`, appends the node and returns its id.
    pub fn apply(&mut self, kind: OpKind, inputs: &[NodeId]) -> Result<NodeId> {
        let vals: Vec<&Tensor> = inputs.iter().map(|&i| &self.nodes[i.0].value).collect();
        let value = forward(&kind, &vals)?;
        let requires_grad = inputs.iter().any(|&i| self.nodes[i.0].requires_grad);
        Ok(self.push(Source::Op { kind, inputs: inputs.to_vec() }, value, requires_grad))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::MatMul, &[a, b])
    }
    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Transpose, &[a])
    }
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        self.apply(OpKind::Conv2d { stride, pad }, &[x, w])
    }
    pub fn conv_transpose(
        &mut self,
        gy: NodeId,
        w: NodeId,
        stride: usize,
        pad: usize,
        out_hw: (usize, usize),
    ) -> Result<NodeId> {
        self.apply(OpKind::ConvTranspose { stride, pad, out_hw }, &[gy, w])
    }
    pub fn conv_weight_grad(
        &mut self,
        x: NodeId,
        gy: NodeId,
        stride: usize,
        pad: usize,
        kernel_hw: (usize, usize),
    ) -> Result<NodeId> {
        self.apply(OpKind::ConvWeightGrad { stride, pad, kernel_hw }, &[x, gy])
    }
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Add, &[a, b])
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Mul, &[a, b])
    }
    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Div, &[a, b])
    }
    pub fn affine(&mut self, a: NodeId, alpha: f64, beta: f64) -> Result<NodeId> {
        self.apply(OpKind::Affine { alpha, beta }, &[a])
    }
    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.affine(a, c, 0.0)
    }
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::AddBias, &[x, b])
    }
    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Relu, &[a])
    }
    pub fn step(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Step, &[a])
    }
    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Sigmoid, &[a])
    }
    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Tanh, &[a])
    }
    pub fn leaky_relu(&mut self, a: NodeId, alpha: f64) -> Result<NodeId> {
        self.apply(OpKind::LeakyRelu { alpha }, &[a])
    }
    pub fn leaky_step(&mut self, a: NodeId, alpha: f64) -> Result<NodeId> {
        self.apply(OpKind::LeakyStep { alpha }, &[a])
    }
    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Sqrt, &[a])
    }
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Softmax, &[a])
    }
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        self.apply(OpKind::SoftmaxCrossEntropy { labels: labels.to_vec() }, &[logits])
    }
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Mse, &[a, b])
    }
    pub fn total_variation(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(OpKind::TotalVariation, &[x])
    }
    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.apply(OpKind::Reshape { shape: shape.to_vec() }, &[a])
    }
    pub fn slice(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        self.apply(OpKind::Slice { start, len }, &[a])
    }
    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::ConcatCols, &[a, b])
    }
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Sum, &[a])
    }
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Mean, &[a])
    }
    pub fn sum_to_bias(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::SumToBias, &[a])
    }

    /// `Σ a ⊙ b` as a scalar node.
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let p = self.mul(a, b)?;
        self.sum(p)
    }

    /// Reverse sweep from the scalar node `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if !root.value.is_scalar() {
            return Err(Error::Shape(format!(
                "backward: loss must be scalar, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::from_parts(root.value.shape().to_vec(), vec![1.0]));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Source::Op { kind, inputs } = &node.source else { continue };
            let Some(g) = grads[idx].take() else { continue };
            let vals: Vec<&Tensor> = inputs.iter().map(|&i| &self.nodes[i.0].value).collect();
            let wants: Vec<bool> = inputs.iter().map(|&i| self.nodes[i.0].requires_grad).collect();
            let local = backward_rule(kind, &vals, &node.value, &g, &wants);
            for ((inp, want), lg) in inputs.iter().zip(&wants).zip(local) {
                if !want {
                    continue;
                }
                if let Some(lg) = lg {
                    accumulate(&mut grads[inp.0], lg);
                }
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

fn expect_arity(kind: &OpKind, inputs: &[&Tensor], n: usize) -> Result<()> {
    if inputs.len() != n {
        return Err(Error::Shape(format!("{kind:?}: expected {n} inputs, got {}", inputs.len())));
    }
    Ok(())
}

fn same_shape(kind: &OpKind, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{}: operand shapes {:?} and {:?} differ",
            op_name(kind),
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn op_name(kind: &OpKind) -> &'static str {
    match kind {
        OpKind::MatMul => "matmul",
        OpKind::Transpose => "transpose",
        OpKind::Conv2d { .. } => "conv2d",
        OpKind::ConvTranspose { .. } => "conv_transpose",
        OpKind::ConvWeightGrad { .. } => "conv_weight_grad",
        OpKind::Add => "add",
        OpKind::Sub => "sub",
        OpKind::Mul => "mul",
        OpKind::Div => "div",
        OpKind::Affine { .. } => "scale",
        OpKind::AddBias => "add_bias",
        OpKind::Relu => "relu",
        OpKind::Step => "step",
        OpKind::Sigmoid => "sigmoid",
        OpKind::Tanh => "tanh",
        OpKind::LeakyRelu { .. } => "leaky_relu",
        OpKind::LeakyStep { .. } => "leaky_step",
        OpKind::Sqrt => "sqrt",
        OpKind::Softmax => "softmax",
        OpKind::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
        OpKind::Mse => "mse",
        OpKind::TotalVariation => "total_variation",
        OpKind::Reshape { .. } => "reshape",
        OpKind::Slice { .. } => "slice",
        OpKind::ConcatCols => "concat_cols",
        OpKind::Sum => "sum",
        OpKind::Mean => "mean",
        OpKind::SumToBias => "sum_to_bias",
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Evaluates one primitive, validating shapes.
pub fn forward(kind: &OpKind, inputs: &[&Tensor]) -> Result<Tensor> {
    use OpKind::*;
    let unary = matches!(
        kind,
        Transpose
            | Affine { .. }
            | Relu
            | Step
            | Sigmoid
            | Tanh
            | LeakyRelu { .. }
            | LeakyStep { .. }
            | Sqrt
            | Softmax
            | SoftmaxCrossEntropy { .. }
            | TotalVariation
            | Reshape { .. }
            | Slice { .. }
            | Sum
            | Mean
            | SumToBias
    );
    expect_arity(kind, inputs, if unary { 1 } else { 2 })?;
    let a = inputs[0];
    Ok(match kind {
        MatMul => kernels::matmul(a, inputs[1])?,
        Transpose => a.transpose2()?,
        Conv2d { stride, pad } => {
            let g = ConvGeom::new(a.shape(), inputs[1].shape(), *stride, *pad)?;
            kernels::conv2d(a, inputs[1], &g)
        }
        ConvTranspose { stride, pad, out_hw } => {
            let (gy, w) = (a, inputs[1]);
            if gy.rank() != 4 || w.rank() != 4 || gy.shape()[1] != w.shape()[0] {
                return Err(Error::Shape(format!(
                    "conv_transpose: input {:?} incompatible with kernel {:?}",
                    gy.shape(),
                    w.shape()
                )));
            }
            let xs = [gy.shape()[0], w.shape()[1], out_hw.0, out_hw.1];
            let g = ConvGeom::new(&xs, w.shape(), *stride, *pad)?;
            if g.oh != gy.shape()[2] || g.ow != gy.shape()[3] {
                return Err(Error::Shape(format!(
                    "conv_transpose: output {out_hw:?} does not map back to input {:?}",
                    gy.shape()
                )));
            }
            kernels::conv2d_input_grad(gy, w, &g)
        }
        ConvWeightGrad { stride, pad, kernel_hw } => {
            let (x, gy) = (a, inputs[1]);
            if x.rank() != 4 || gy.rank() != 4 || x.shape()[0] != gy.shape()[0] {
                return Err(Error::Shape(format!(
                    "conv_weight_grad: input {:?} incompatible with output gradient {:?}",
                    x.shape(),
                    gy.shape()
                )));
            }
            let ws = [gy.shape()[1], x.shape()[1], kernel_hw.0, kernel_hw.1];
            let g = ConvGeom::new(x.shape(), &ws, *stride, *pad)?;
            if g.out_shape() != gy.shape() {
                return Err(Error::Shape(format!(
                    "conv_weight_grad: output gradient {:?} does not match convolution output {:?}",
                    gy.shape(),
                    g.out_shape()
                )));
            }
            kernels::conv2d_weight_grad(x, gy, &g)
        }
        Add | Sub | Mul | Div => {
            let b = inputs[1];
            same_shape(kind, a, b)?;
            match kind {
                Add => a.zip_map(b, |x, y| x + y)?,
                Sub => a.zip_map(b, |x, y| x - y)?,
                Mul => a.zip_map(b, |x, y| x * y)?,
                _ => a.zip_map(b, |x, y| x / y)?,
            }
        }
        Affine { alpha, beta } => a.map(|v| alpha * v + beta),
        AddBias => {
            let b = inputs[1];
            if a.rank() < 2 || b.rank() != 1 || b.len() != a.shape()[1] {
                return Err(Error::Shape(format!(
                    "add_bias: bias {:?} does not match axis 1 of {:?}",
                    b.shape(),
                    a.shape()
                )));
            }
            let bb = kernels::broadcast_bias(b.data(), a.shape());
            a.zip_map(&bb, |x, y| x + y)?
        }
        Relu => a.map(|v| v.max(0.0)),
        Step => a.map(|v| if v > 0.0 { 1.0 } else { 0.0 }),
        Sigmoid => a.map(sigmoid),
        Tanh => a.map(f64::tanh),
        LeakyRelu { alpha } => a.map(|v| if v > 0.0 { v } else { alpha * v }),
        LeakyStep { alpha } => a.map(|v| if v > 0.0 { 1.0 } else { *alpha }),
        Sqrt => {
            if a.data().iter().any(|&v| v < 0.0) {
                return Err(Error::Invalid("sqrt: negative operand".into()));
            }
            a.map(f64::sqrt)
        }
        Softmax => {
            if a.rank() != 2 {
                return Err(Error::Shape(format!("softmax: expected rank 2, got {:?}", a.shape())));
            }
            kernels::softmax_rows(a)
        }
        SoftmaxCrossEntropy { labels } => {
            if a.rank() != 2 || labels.len() != a.shape()[0] {
                return Err(Error::Shape(format!(
                    "softmax_cross_entropy: logits {:?} with {} labels",
                    a.shape(),
                    labels.len()
                )));
            }
            if let Some(&bad) = labels.iter().find(|&&y| y >= a.shape()[1]) {
                return Err(Error::Shape(format!(
                    "softmax_cross_entropy: label {bad} out of range for {} classes",
                    a.shape()[1]
                )));
            }
            Tensor::scalar(kernels::softmax_cross_entropy(a, labels))
        }
        Mse => {
            let b = inputs[1];
            same_shape(kind, a, b)?;
            let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
            Tensor::scalar(s / a.len() as f64)
        }
        TotalVariation => {
            if a.rank() != 4 || a.shape()[2] < 2 || a.shape()[3] < 2 {
                return Err(Error::Shape(format!(
                    "total_variation: expected [b,c,h,w] with h,w >= 2, got {:?}",
                    a.shape()
                )));
            }
            Tensor::scalar(kernels::total_variation(a))
        }
        Reshape { shape } => a.reshape(shape).map_err(|_| {
            Error::Shape(format!("reshape: cannot view {:?} as {shape:?}", a.shape()))
        })?,
        Slice { start, len } => a.slice_rows(*start, *len)?,
        ConcatCols => {
            let b = inputs[1];
            if a.rank() != 2 || b.rank() != 2 || a.shape()[0] != b.shape()[0] {
                return Err(Error::Shape(format!(
                    "concat_cols: shapes {:?} and {:?} are not row-compatible",
                    a.shape(),
                    b.shape()
                )));
            }
            let (n, p, q) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let mut out = Vec::with_capacity(n * (p + q));
            for i in 0..n {
                out.extend_from_slice(&a.data()[i * p..(i + 1) * p]);
                out.extend_from_slice(&b.data()[i * q..(i + 1) * q]);
            }
            Tensor::from_parts(vec![n, p + q], out)
        }
        Sum => Tensor::scalar(a.sum()),
        Mean => Tensor::scalar(a.mean()),
        SumToBias => {
            if a.rank() < 2 {
                return Err(Error::Shape(format!("sum_to_bias: expected rank >= 2, got {:?}", a.shape())));
            }
            kernels::sum_to_bias(a)
        }
    })
}

/// Vector-Jacobian products of one node; `None` for inputs that need no gradient.
fn backward_rule(
    kind: &OpKind,
    inputs: &[&Tensor],
    out: &Tensor,
    g: &Tensor,
    wants: &[bool],
) -> Vec<Option<Tensor>> {
    use OpKind::*;
    let a = inputs[0];
    let want = |i: usize| wants[i];
    let gs = g.data()[0];
    match kind {
        MatMul => {
            let b = inputs[1];
            vec![
                want(0).then(|| kernels::matmul_nt(g, b)),
                want(1).then(|| kernels::matmul_tn(a, g)),
            ]
        }
        Transpose => vec![Some(g.transpose2().expect("rank checked in forward"))],
        Conv2d { stride, pad } => {
            let w = inputs[1];
            let geom = ConvGeom::new(a.shape(), w.shape(), *stride, *pad).expect("checked in forward");
            vec![
                want(0).then(|| kernels::conv2d_input_grad(g, w, &geom)),
                want(1).then(|| kernels::conv2d_weight_grad(a, g, &geom)),
            ]
        }
        ConvTranspose { stride, pad, .. } => {
            // out = B(gy, w) with <B(gy, w), v> = <gy, conv(v, w)>
            let w = inputs[1];
            let geom = ConvGeom::new(out.shape(), w.shape(), *stride, *pad).expect("checked in forward");
            vec![
                want(0).then(|| kernels::conv2d(g, w, &geom)),
                want(1).then(|| kernels::conv2d_weight_grad(g, a, &geom)),
            ]
        }
        ConvWeightGrad { stride, pad, .. } => {
            // out = C(x, gy) with <C(x, gy), v> = <gy, conv(x, v)>
            let gy = inputs[1];
            let geom = ConvGeom::new(a.shape(), out.shape(), *stride, *pad).expect("checked in forward");
            vec![
                want(0).then(|| kernels::conv2d_input_grad(gy, g, &geom)),
                want(1).then(|| kernels::conv2d(a, g, &geom)),
            ]
        }
        Add => vec![Some(g.clone()), Some(g.clone())],
        Sub => vec![Some(g.clone()), want(1).then(|| g.scale(-1.0))],
        Mul => {
            let b = inputs[1];
            vec![
                want(0).then(|| g.zip_map(b, |x, y| x * y).expect("same shape")),
                want(1).then(|| g.zip_map(a, |x, y| x * y).expect("same shape")),
            ]
        }
        Div => {
            let b = inputs[1];
            vec![
                want(0).then(|| g.zip_map(b, |x, y| x / y).expect("same shape")),
                want(1).then(|| {
                    let q = out.zip_map(b, |o, y| o / y).expect("same shape");
                    g.zip_map(&q, |x, y| -x * y).expect("same shape")
                }),
            ]
        }
        Affine { alpha, .. } => vec![Some(g.scale(*alpha))],
        AddBias => vec![want(0).then(|| g.clone()), want(1).then(|| kernels::sum_to_bias(g))],
        Relu => vec![Some(g.zip_map(a, |x, v| if v > 0.0 { x } else { 0.0 }).expect("same shape"))],
        Step | LeakyStep { .. } => vec![None],
        Sigmoid => vec![Some(g.zip_map(out, |x, s| x * s * (1.0 - s)).expect("same shape"))],
        Tanh => vec![Some(g.zip_map(out, |x, t| x * (1.0 - t * t)).expect("same shape"))],
        LeakyRelu { alpha } => {
            vec![Some(g.zip_map(a, |x, v| if v > 0.0 { x } else { alpha * x }).expect("same shape"))]
        }
        Sqrt => vec![Some(g.zip_map(out, |x, s| x / (2.0 * s)).expect("same shape"))],
        Softmax => {
            let k = a.shape()[1];
            let mut d = Vec::with_capacity(a.len());
            for (srow, grow) in out.data().chunks(k).zip(g.data().chunks(k)) {
                let inner: f64 = srow.iter().zip(grow).map(|(s, x)| s * x).sum();
                d.extend(srow.iter().zip(grow).map(|(s, x)| s * (x - inner)));
            }
            vec![Some(Tensor::from_parts(a.shape().to_vec(), d))]
        }
        SoftmaxCrossEntropy { labels } => {
            let mut p = kernels::softmax_rows(a);
            let k = a.shape()[1];
            let n = labels.len() as f64;
            for (i, &y) in labels.iter().enumerate() {
                p.data_mut()[i * k + y] -= 1.0;
            }
            vec![Some(p.scale(gs / n))]
        }
        Mse => {
            let b = inputs[1];
            let c = 2.0 * gs / a.len() as f64;
            let d = a.zip_map(b, |x, y| c * (x - y)).expect("same shape");
            vec![want(0).then(|| d.clone()), want(1).then(|| d.scale(-1.0))]
        }
        TotalVariation => vec![Some(kernels::total_variation_grad(a, gs))],
        Reshape { .. } => vec![Some(Tensor::from_parts(a.shape().to_vec(), g.data().to_vec()))],
        Slice { start, len } => {
            let rows = a.shape()[0];
            let stride = a.len() / rows;
            let mut d = vec![0.0; a.len()];
            d[start * stride..(start + len) * stride].copy_from_slice(g.data());
            vec![Some(Tensor::from_parts(a.shape().to_vec(), d))]
        }
        ConcatCols => {
            let b = inputs[1];
            let (n, p, q) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let mut da = Vec::with_capacity(n * p);
            let mut db = Vec::with_capacity(n * q);
            for row in g.data().chunks(p + q) {
                da.extend_from_slice(&row[..p]);
                db.extend_from_slice(&row[p..]);
            }
            vec![
                want(0).then(|| Tensor::from_parts(vec![n, p], da)),
                want(1).then(|| Tensor::from_parts(vec![n, q], db)),
            ]
        }
        Sum => vec![Some(Tensor::full(a.shape(), gs))],
        Mean => vec![Some(Tensor::full(a.shape(), gs / a.len() as f64))],
        SumToBias => vec![Some(kernels::broadcast_bias(g.data(), a.shape()))],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_matmul() {
        let mut g = Graph::new();
        let i = g.constant(Tensor::eye(2));
        let a = g.constant(Tensor::new(vec![2, 2], vec![1.5, -2.0, 0.25, 7.0]).unwrap());
        let y = g.matmul(i, a).unwrap();
        assert_eq!(g.value(y), g.value(a));
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(0.0));
        let y = g.sigmoid(x).unwrap();
        assert_eq!(g.value(y).item(), 0.5);
    }

    #[test]
    fn sum_gives_ones() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::new(vec![2, 3], vec![0.3; 6]).unwrap());
        let s = g.sum(x).unwrap();
        assert_eq!(g.backward(s).unwrap().get(x), Tensor::ones(&[2, 3]));
    }

    #[test]
    fn mse_against_zero() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::from_vec(vec![2.0]));
        let z = g.constant(Tensor::from_vec(vec![0.0]));
        let l = g.mse(x, z).unwrap();
        assert_eq!(g.value(l).item(), 4.0);
        assert_eq!(g.backward(l).unwrap().get(x).data(), &[4.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::zeros(&[3]));
        assert!(matches!(g.backward(x), Err(Error::Shape(_))));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let msg = g.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
        let c = g.constant(Tensor::zeros(&[3, 2]));
        assert!(g.add(a, c).unwrap_err().to_string().contains("add"));
        let img = g.constant(Tensor::zeros(&[1, 1, 1, 4]));
        assert!(g.total_variation(img).is_err());
    }

    #[test]
    fn constants_receive_no_gradient_work() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::from_vec(vec![1.0, 2.0]));
        let x = g.variable(Tensor::from_vec(vec![3.0, 4.0]));
        let p = g.mul(c, x).unwrap();
        let s = g.sum(p).unwrap();
        assert!(!g.requires_grad(c));
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).data(), &[1.0, 2.0]);
        assert_eq!(grads.get(c).data(), &[0.0, 0.0]);
    }
}
