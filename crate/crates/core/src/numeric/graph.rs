//! Define-then-run compute graph with reverse-mode differentiation.
//!
//! Nodes are appended in construction order, which is also a topological
//! order: every node only refers to nodes created before it. `forward`
//! binds the named leaves, evaluates every node and keeps the activations;
//! `backward` walks the same list in reverse and returns one gradient per
//! `param` leaf.

use std::collections::{BTreeMap, HashMap};

use super::kernels::{self, ConvGeom, NormShape};
use super::{NamedTensors, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Debug, Clone)]
enum Op {
    Input(String),
    Param(String),
    Constant(Tensor),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f32),
    Sum(NodeId),
    MatMul(NodeId, NodeId),
    AddRowBias(NodeId, NodeId),
    AddChannel(NodeId, NodeId),
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        padding: Padding,
    },
    Upsample2x(NodeId),
    AvgPool2x(NodeId),
    Silu(NodeId),
    GroupNorm {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        groups: usize,
    },
    Concat(NodeId, NodeId),
    Reshape(NodeId, Vec<usize>),
    Mse(NodeId, NodeId),
    SoftmaxCrossEntropy(NodeId, Vec<usize>),
    TimeEmbedding { steps: Vec<u32>, dim: usize },
    Argmax(NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Param(_) => "param",
            Op::Constant(_) => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sum(_) => "sum",
            Op::MatMul(..) => "matmul",
            Op::AddRowBias(..) => "add_row_bias",
            Op::AddChannel(..) => "add_channel",
            Op::Conv2d { .. } => "conv2d",
            Op::Upsample2x(_) => "upsample2x",
            Op::AvgPool2x(_) => "avgpool2x",
            Op::Silu(_) => "silu",
            Op::GroupNorm { .. } => "group_norm",
            Op::Concat(..) => "concat",
            Op::Reshape(..) => "reshape",
            Op::Mse(..) => "mse",
            Op::SoftmaxCrossEntropy(..) => "softmax_cross_entropy",
            Op::TimeEmbedding { .. } => "time_embedding",
            Op::Argmax(_) => "argmax",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Input(_) | Op::Param(_) | Op::Constant(_) | Op::TimeEmbedding { .. } => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::MatMul(a, b)
            | Op::AddRowBias(a, b)
            | Op::AddChannel(a, b)
            | Op::Concat(a, b)
            | Op::Mse(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Sum(a)
            | Op::Upsample2x(a)
            | Op::AvgPool2x(a)
            | Op::Silu(a)
            | Op::Reshape(a, _)
            | Op::SoftmaxCrossEntropy(a, _)
            | Op::Argmax(a) => vec![*a],
            Op::Conv2d {
                input,
                weight,
                bias,
                ..
            } => {
                let mut v = vec![*input, *weight];
                v.extend(bias);
                v
            }
            Op::GroupNorm {
                input, gamma, beta, ..
            } => vec![*input, *gamma, *beta],
        }
    }
}

/// Source of named leaf tensors for `Graph::forward`.
pub trait Bindings {
    fn lookup(&self, name: &str) -> Option<&Tensor>;
}

impl Bindings for BTreeMap<String, Tensor> {
    fn lookup(&self, name: &str) -> Option<&Tensor> {
        self.get(name)
    }
}

impl Bindings for HashMap<String, Tensor> {
    fn lookup(&self, name: &str) -> Option<&Tensor> {
        self.get(name)
    }
}

impl Bindings for &[(&str, &Tensor)] {
    fn lookup(&self, name: &str) -> Option<&Tensor> {
        self.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Graph {
    ops: Vec<Op>,
    values: Vec<Option<Tensor>>,
    output: Option<NodeId>,
    evaluated: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    fn push(&mut self, op: Op) -> NodeId {
        self.ops.push(op);
        self.values.push(None);
        self.evaluated = false;
        NodeId(self.ops.len() - 1)
    }

    pub fn input(&mut self, name: impl Into<String>) -> NodeId {
        self.push(Op::Input(name.into()))
    }

    pub fn param(&mut self, name: impl Into<String>) -> NodeId {
        self.push(Op::Param(name.into()))
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Constant(value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, factor: f32) -> NodeId {
        self.push(Op::Scale(a, factor))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }

    /// `x[m, n] + bias[n]` broadcast over rows.
    pub fn add_row_bias(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        self.push(Op::AddRowBias(x, bias))
    }

    /// `x[b, c, h, w] + v[b, c]` broadcast over the spatial axes.
    pub fn add_channel(&mut self, x: NodeId, v: NodeId) -> NodeId {
        self.push(Op::AddChannel(x, v))
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        padding: Padding,
    ) -> NodeId {
        self.push(Op::Conv2d {
            input,
            weight,
            bias,
            padding,
        })
    }

    pub fn upsample2x(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Upsample2x(a))
    }

    pub fn avgpool2x(&mut self, a: NodeId) -> NodeId {
        self.push(Op::AvgPool2x(a))
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Silu(a))
    }

    pub fn group_norm(&mut self, input: NodeId, gamma: NodeId, beta: NodeId, groups: usize) -> NodeId {
        self.push(Op::GroupNorm {
            input,
            gamma,
            beta,
            groups,
        })
    }

    /// Concatenation along axis 1.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Concat(a, b))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        self.push(Op::Reshape(a, shape.to_vec()))
    }

    pub fn mse(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mse(a, b))
    }

    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> NodeId {
        self.push(Op::SoftmaxCrossEntropy(logits, labels.to_vec()))
    }

    pub fn time_embedding(&mut self, steps: &[u32], dim: usize) -> NodeId {
        self.push(Op::TimeEmbedding {
            steps: steps.to_vec(),
            dim,
        })
    }

    /// Row-wise argmax as f32 class indices. Not differentiable.
    pub fn argmax(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Argmax(a))
    }

    pub fn set_output(&mut self, id: NodeId) {
        self.output = Some(id);
        self.evaluated = false;
    }

    pub fn output(&self) -> Option<NodeId> {
        self.output
    }

    /// Activation of `id` from the last forward pass.
    pub fn value(&self, id: NodeId) -> Option<&Tensor> {
        self.values.get(id.0).and_then(Option::as_ref)
    }

    pub fn param_names(&self) -> Vec<&str> {
        self.ops
            .iter()
            .filter_map(|op| match op {
                Op::Param(n) => Some(n.as_str()),
                _ => None,
            })
            .collect()
    }

    /// Evaluates every node in order and returns the output value. Leaves are
    /// looked up by name in each of `bindings` in turn.
    pub fn forward(&mut self, bindings: &[&dyn Bindings]) -> Result<&Tensor> {
        let output = self
            .output
            .ok_or_else(|| Error::Usage("graph has no output node".into()))?;
        self.evaluated = false;
        for i in 0..self.ops.len() {
            let value = self.eval_node(i, bindings)?;
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    node: i,
                    op: self.ops[i].name(),
                });
            }
            self.values[i] = Some(value);
        }
        self.evaluated = true;
        Ok(self.values[output.0].as_ref().unwrap())
    }

    fn val(&self, id: NodeId) -> &Tensor {
        self.values[id.0].as_ref().expect("inputs evaluated first")
    }

    fn eval_node(&self, i: usize, bindings: &[&dyn Bindings]) -> Result<Tensor> {
        let op = &self.ops[i];
        let name = op.name();
        let err = |detail: String| Error::shape(i, name, detail);
        for id in op.inputs() {
            if id.0 >= i {
                return Err(err(format!("refers to later node {}", id.0)));
            }
        }
        Ok(match op {
            Op::Input(n) | Op::Param(n) => bindings
                .iter()
                .find_map(|b| b.lookup(n))
                .cloned()
                .ok_or_else(|| err(format!("leaf `{n}` is not bound")))?,
            Op::Constant(t) => t.clone(),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let (x, y) = (self.val(*a), self.val(*b));
                if x.shape() != y.shape() {
                    return Err(err(format!("{:?} vs {:?}", x.shape(), y.shape())));
                }
                match op {
                    Op::Add(..) => x.zip_map(y, |p, q| p + q)?,
                    Op::Sub(..) => x.zip_map(y, |p, q| p - q)?,
                    _ => x.zip_map(y, |p, q| p * q)?,
                }
            }
            Op::Scale(a, f) => self.val(*a).map(|v| v * f),
            Op::Sum(a) => Tensor::scalar(sum_f64(self.val(*a).data()) as f32),
            Op::MatMul(a, b) => {
                let (x, y) = (self.val(*a), self.val(*b));
                if x.rank() != 2 || y.rank() != 2 || x.shape()[1] != y.shape()[0] {
                    return Err(err(format!("{:?} x {:?}", x.shape(), y.shape())));
                }
                let (m, k, n) = (x.shape()[0], x.shape()[1], y.shape()[1]);
                Tensor::new(vec![m, n], kernels::matmul(m, k, n, x.data(), y.data()))?
            }
            Op::AddRowBias(a, b) => {
                let (x, bias) = (self.val(*a), self.val(*b));
                if x.rank() != 2 || bias.rank() != 1 || bias.numel() != x.shape()[1] {
                    return Err(err(format!("{:?} + bias {:?}", x.shape(), bias.shape())));
                }
                let n = bias.numel();
                let mut out = x.clone();
                for (j, v) in out.data_mut().iter_mut().enumerate() {
                    *v += bias.data()[j % n];
                }
                out
            }
            Op::AddChannel(a, b) => {
                let (x, v) = (self.val(*a), self.val(*b));
                if x.rank() != 4 || v.shape() != &x.shape()[..2] {
                    return Err(err(format!("{:?} + channel {:?}", x.shape(), v.shape())));
                }
                let plane = x.shape()[2] * x.shape()[3];
                let mut out = x.clone();
                for (j, o) in out.data_mut().iter_mut().enumerate() {
                    *o += v.data()[j / plane];
                }
                out
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                padding,
            } => {
                let (x, w) = (self.val(*input), self.val(*weight));
                let geom = conv_geom(x, w, *padding).map_err(err)?;
                let b = match bias {
                    Some(b) => {
                        let b = self.val(*b);
                        if b.shape() != [geom.out_ch] {
                            return Err(err(format!("bias {:?}", b.shape())));
                        }
                        Some(b.data())
                    }
                    None => None,
                };
                let batch = x.shape()[0];
                let out = kernels::conv2d_forward(&geom, batch, x.data(), w.data(), b);
                Tensor::new(vec![batch, geom.out_ch, geom.out_h(), geom.out_w()], out)?
            }
            Op::Upsample2x(a) => {
                let x = self.val(*a);
                let (planes, h, w) = spatial(x).map_err(err)?;
                let mut shape = x.shape().to_vec();
                shape[2] *= 2;
                shape[3] *= 2;
                Tensor::new(shape, kernels::upsample2x(planes, h, w, x.data()))?
            }
            Op::AvgPool2x(a) => {
                let x = self.val(*a);
                let (planes, h, w) = spatial(x).map_err(err)?;
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(err(format!("odd spatial size {h}x{w}")));
                }
                let mut shape = x.shape().to_vec();
                shape[2] /= 2;
                shape[3] /= 2;
                Tensor::new(shape, kernels::avgpool2x(planes, h, w, x.data()))?
            }
            Op::Silu(a) => self.val(*a).map(kernels::silu),
            Op::GroupNorm {
                input,
                gamma,
                beta,
                groups,
            } => {
                let x = self.val(*input);
                let s = norm_shape(x, *groups).map_err(err)?;
                let (g, b) = (self.val(*gamma), self.val(*beta));
                if g.shape() != [s.channels] || b.shape() != [s.channels] {
                    return Err(err(format!("affine {:?}/{:?}", g.shape(), b.shape())));
                }
                let out = kernels::group_norm_forward(&s, x.data(), g.data(), b.data());
                Tensor::new(x.shape().to_vec(), out)?
            }
            Op::Concat(a, b) => {
                let (x, y) = (self.val(*a), self.val(*b));
                if x.rank() < 2
                    || x.rank() != y.rank()
                    || x.shape()[0] != y.shape()[0]
                    || x.shape()[2..] != y.shape()[2..]
                {
                    return Err(err(format!("{:?} ++ {:?}", x.shape(), y.shape())));
                }
                let (xr, yr) = (x.row_len(), y.row_len());
                let mut data = Vec::with_capacity(x.numel() + y.numel());
                for r in 0..x.shape()[0] {
                    data.extend_from_slice(&x.data()[r * xr..(r + 1) * xr]);
                    data.extend_from_slice(&y.data()[r * yr..(r + 1) * yr]);
                }
                let mut shape = x.shape().to_vec();
                shape[1] += y.shape()[1];
                Tensor::new(shape, data)?
            }
            Op::Reshape(a, shape) => {
                let x = self.val(*a);
                x.clone()
                    .reshape(shape)
                    .map_err(|_| err(format!("{:?} -> {shape:?}", x.shape())))?
            }
            Op::Mse(a, b) => {
                let (x, y) = (self.val(*a), self.val(*b));
                if x.shape() != y.shape() {
                    return Err(err(format!("{:?} vs {:?}", x.shape(), y.shape())));
                }
                let s: f64 = x
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&p, &q)| (p as f64 - q as f64).powi(2))
                    .sum();
                Tensor::scalar((s / x.numel() as f64) as f32)
            }
            Op::SoftmaxCrossEntropy(a, labels) => {
                let x = self.val(*a);
                if x.rank() != 2 || x.shape()[0] != labels.len() {
                    return Err(err(format!("logits {:?} for {} labels", x.shape(), labels.len())));
                }
                let (rows, cols) = (x.shape()[0], x.shape()[1]);
                if let Some(l) = labels.iter().find(|&&l| l >= cols) {
                    return Err(err(format!("label {l} >= {cols} classes")));
                }
                let p = kernels::softmax_rows(rows, cols, x.data());
                let nll: f64 = labels
                    .iter()
                    .enumerate()
                    .map(|(r, &l)| -p[r * cols + l].max(1e-300).ln())
                    .sum();
                Tensor::scalar((nll / rows as f64) as f32)
            }
            Op::TimeEmbedding { steps, dim } => {
                if *dim == 0 || dim % 2 != 0 || steps.is_empty() {
                    return Err(err(format!("dim {dim} must be even and positive")));
                }
                Tensor::new(vec![steps.len(), *dim], kernels::sinusoidal(steps, *dim))?
            }
            Op::Argmax(a) => {
                let x = self.val(*a);
                if x.rank() != 2 {
                    return Err(err(format!("argmax needs rank 2, got {:?}", x.shape())));
                }
                let cols = x.shape()[1];
                let data = x
                    .data()
                    .chunks(cols)
                    .map(|row| argmax(row) as f32)
                    .collect();
                Tensor::new(vec![x.shape()[0]], data)?
            }
        })
    }

    fn needs_grad(&self) -> Vec<bool> {
        let mut needs = vec![false; self.ops.len()];
        for (i, op) in self.ops.iter().enumerate() {
            needs[i] = match op {
                Op::Param(_) => true,
                Op::Input(_) | Op::Constant(_) | Op::TimeEmbedding { .. } => false,
                _ => op.inputs().iter().any(|id| needs[id.0]),
            };
        }
        needs
    }

    /// Reverse pass from the scalar output. Returns a gradient for every
    /// `param` leaf (zeros when the output does not depend on it).
    pub fn backward(&self) -> Result<NamedTensors> {
        let output = self
            .output
            .ok_or_else(|| Error::Usage("graph has no output node".into()))?;
        if !self.evaluated {
            return Err(Error::Usage("backward called before forward".into()));
        }
        if self.val(output).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar output, got shape {:?}",
                self.val(output).shape()
            )));
        }
        let needs = self.needs_grad();
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.ops.len()];
        grads[output.0] = Some(vec![1.0]);

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !needs[i] {
                continue;
            }
            let op = &self.ops[i];
            if let Op::Param(_) = op {
                grads[i] = Some(g);
                continue;
            }
            for (id, d) in self.node_vjp(i, &g, &needs)? {
                match &mut grads[id.0] {
                    Some(acc) => acc.iter_mut().zip(&d).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(d),
                }
            }
        }

        let mut out = NamedTensors::new();
        for (i, op) in self.ops.iter().enumerate() {
            if let Op::Param(name) = op {
                let shape = self.val(NodeId(i)).shape().to_vec();
                let data = grads[i]
                    .take()
                    .unwrap_or_else(|| vec![0.0; shape.iter().product()]);
                let g = Tensor::new(shape, data)?;
                match out.get_mut(name) {
                    Some(acc) => {
                        acc.data_mut()
                            .iter_mut()
                            .zip(g.data())
                            .for_each(|(a, b)| *a += b);
                    }
                    None => {
                        out.insert(name.clone(), g);
                    }
                }
            }
        }
        Ok(out)
    }

    /// Vector-Jacobian products of node `i` for those inputs that need them.
    fn node_vjp(&self, i: usize, g: &[f32], needs: &[bool]) -> Result<Vec<(NodeId, Vec<f32>)>> {
        let op = &self.ops[i];
        let want = |id: &NodeId| needs[id.0];
        let mut out = Vec::new();
        match op {
            Op::Input(_) | Op::Param(_) | Op::Constant(_) | Op::TimeEmbedding { .. } => {}
            Op::Argmax(_) => {
                return Err(Error::UnsupportedOp {
                    node: i,
                    op: op.name(),
                })
            }
            Op::Add(a, b) => {
                if want(a) {
                    out.push((*a, g.to_vec()));
                }
                if want(b) {
                    out.push((*b, g.to_vec()));
                }
            }
            Op::Sub(a, b) => {
                if want(a) {
                    out.push((*a, g.to_vec()));
                }
                if want(b) {
                    out.push((*b, g.iter().map(|v| -v).collect()));
                }
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.val(*a).data(), self.val(*b).data());
                if want(a) {
                    out.push((*a, g.iter().zip(y).map(|(g, y)| g * y).collect()));
                }
                if want(b) {
                    out.push((*b, g.iter().zip(x).map(|(g, x)| g * x).collect()));
                }
            }
            Op::Scale(a, f) => out.push((*a, g.iter().map(|v| v * f).collect())),
            Op::Sum(a) => out.push((*a, vec![g[0]; self.val(*a).numel()])),
            Op::MatMul(a, b) => {
                let (x, y) = (self.val(*a), self.val(*b));
                let (m, k, n) = (x.shape()[0], x.shape()[1], y.shape()[1]);
                let (da, db) = kernels::matmul_backward(m, k, n, x.data(), y.data(), g);
                if want(a) {
                    out.push((*a, da));
                }
                if want(b) {
                    out.push((*b, db));
                }
            }
            Op::AddRowBias(a, b) => {
                if want(a) {
                    out.push((*a, g.to_vec()));
                }
                if want(b) {
                    let n = self.val(*b).numel();
                    let mut db = vec![0.0f32; n];
                    for (j, v) in g.iter().enumerate() {
                        db[j % n] += v;
                    }
                    out.push((*b, db));
                }
            }
            Op::AddChannel(a, b) => {
                if want(a) {
                    out.push((*a, g.to_vec()));
                }
                if want(b) {
                    let x = self.val(*a);
                    let plane = x.shape()[2] * x.shape()[3];
                    let dv = g.chunks(plane).map(|c| c.iter().sum()).collect();
                    out.push((*b, dv));
                }
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                padding,
            } => {
                let (x, w) = (self.val(*input), self.val(*weight));
                let geom = conv_geom(x, w, *padding).expect("checked in forward");
                let grads = kernels::conv2d_backward(&geom, x.shape()[0], x.data(), w.data(), g);
                if want(input) {
                    out.push((*input, grads.dx));
                }
                if want(weight) {
                    out.push((*weight, grads.dweight));
                }
                if let Some(b) = bias {
                    if want(b) {
                        out.push((*b, grads.dbias));
                    }
                }
            }
            Op::Upsample2x(a) => {
                let (planes, h, w) = spatial(self.val(*a)).expect("checked in forward");
                out.push((*a, kernels::upsample2x_backward(planes, h, w, g)));
            }
            Op::AvgPool2x(a) => {
                let (planes, h, w) = spatial(self.val(*a)).expect("checked in forward");
                out.push((*a, kernels::avgpool2x_backward(planes, h, w, g)));
            }
            Op::Silu(a) => {
                let x = self.val(*a).data();
                out.push((*a, g.iter().zip(x).map(|(g, &x)| g * kernels::silu_grad(x)).collect()));
            }
            Op::GroupNorm {
                input,
                gamma,
                beta,
                groups,
            } => {
                let x = self.val(*input);
                let s = norm_shape(x, *groups).expect("checked in forward");
                let (dx, dg, db) =
                    kernels::group_norm_backward(&s, x.data(), self.val(*gamma).data(), g);
                if want(input) {
                    out.push((*input, dx));
                }
                if want(gamma) {
                    out.push((*gamma, dg));
                }
                if want(beta) {
                    out.push((*beta, db));
                }
            }
            Op::Concat(a, b) => {
                let (x, y) = (self.val(*a), self.val(*b));
                let (xr, yr) = (x.row_len(), y.row_len());
                let rows = x.shape()[0];
                let mut dx = Vec::with_capacity(x.numel());
                let mut dy = Vec::with_capacity(y.numel());
                for r in 0..rows {
                    let base = r * (xr + yr);
                    dx.extend_from_slice(&g[base..base + xr]);
                    dy.extend_from_slice(&g[base + xr..base + xr + yr]);
                }
                if want(a) {
                    out.push((*a, dx));
                }
                if want(b) {
                    out.push((*b, dy));
                }
            }
            Op::Reshape(a, _) => out.push((*a, g.to_vec())),
            Op::Mse(a, b) => {
                let (x, y) = (self.val(*a).data(), self.val(*b).data());
                let scale = 2.0 * g[0] / x.len() as f32;
                let d: Vec<f32> = x.iter().zip(y).map(|(p, q)| scale * (p - q)).collect();
                if want(b) {
                    out.push((*b, d.iter().map(|v| -v).collect()));
                }
                if want(a) {
                    out.push((*a, d));
                }
            }
            Op::SoftmaxCrossEntropy(a, labels) => {
                let x = self.val(*a);
                let (rows, cols) = (x.shape()[0], x.shape()[1]);
                let p = kernels::softmax_rows(rows, cols, x.data());
                let scale = g[0] as f64 / rows as f64;
                let mut d: Vec<f32> = p.iter().map(|&v| (v * scale) as f32).collect();
                for (r, &l) in labels.iter().enumerate() {
                    d[r * cols + l] = ((p[r * cols + l] - 1.0) * scale) as f32;
                }
                out.push((*a, d));
            }
        }
        Ok(out)
    }
}

fn sum_f64(xs: &[f32]) -> f64 {
    xs.iter().map(|&v| v as f64).sum()
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

fn spatial(x: &Tensor) -> std::result::Result<(usize, usize, usize), String> {
    if x.rank() != 4 {
        return Err(format!("expected [b, c, h, w], got {:?}", x.shape()));
    }
    let s = x.shape();
    Ok((s[0] * s[1], s[2], s[3]))
}

fn conv_geom(x: &Tensor, w: &Tensor, padding: Padding) -> std::result::Result<ConvGeom, String> {
    if x.rank() != 4 || w.rank() != 4 {
        return Err(format!("conv input {:?}, weight {:?}", x.shape(), w.shape()));
    }
    let (xs, ws) = (x.shape(), w.shape());
    if ws[1] != xs[1] || ws[2] != ws[3] {
        return Err(format!(
            "weight {ws:?} incompatible with input channels {}",
            xs[1]
        ));
    }
    let kernel = ws[2];
    let pad = match padding {
        Padding::Same => {
            if kernel % 2 == 0 {
                return Err(format!("same padding needs an odd kernel, got {kernel}"));
            }
            kernel / 2
        }
        Padding::Valid => {
            if kernel > xs[2] || kernel > xs[3] {
                return Err(format!("kernel {kernel} larger than input {xs:?}"));
            }
            0
        }
    };
    Ok(ConvGeom {
        in_ch: xs[1],
        out_ch: ws[0],
        height: xs[2],
        width: xs[3],
        kernel,
        pad,
    })
}

fn norm_shape(x: &Tensor, groups: usize) -> std::result::Result<NormShape, String> {
    if x.rank() < 2 {
        return Err(format!("group norm needs rank >= 2, got {:?}", x.shape()));
    }
    let channels = x.shape()[1];
    let groups = kernels::effective_groups(groups, channels);
    Ok(NormShape {
        batch: x.shape()[0],
        channels,
        spatial: x.shape()[2..].iter().product(),
        groups,
    })
}
