//! Reverse-mode automatic differentiation over a flat tape.
//!
//! Every forward op appends a node holding its output value and the data
//! its backward rule needs. [`Tape::backward`] walks the tape once in reverse
//! and leaves gradients on the leaf nodes. A tape supports one backward pass;
//! values stay readable afterwards and [`Tape::reset_grads`] re-arms it.

use std::collections::BTreeMap;

use crate::error::{Result, TensorError};
use crate::float::Float;
use crate::ops::conv::ConvGeom;
use crate::ops::linalg::BatchPlan;
use crate::ops::pool::UpsampleMode;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    AddBias,
    Scale,
    SumAll,
    MatMul,
    Conv2d,
    Relu,
    Gelu,
    Sigmoid,
    BatchNorm,
    LayerNorm,
    Softmax,
    MaxPool,
    Upsample,
    Reshape,
    Permute,
    Concat,
    Narrow,
    Dropout,
    Dice,
}

impl OpKind {
    pub const DIFFERENTIABLE: [OpKind; 22] = [
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::AddBias,
        OpKind::Scale,
        OpKind::SumAll,
        OpKind::MatMul,
        OpKind::Conv2d,
        OpKind::Relu,
        OpKind::Gelu,
        OpKind::Sigmoid,
        OpKind::BatchNorm,
        OpKind::LayerNorm,
        OpKind::Softmax,
        OpKind::MaxPool,
        OpKind::Upsample,
        OpKind::Reshape,
        OpKind::Permute,
        OpKind::Concat,
        OpKind::Narrow,
        OpKind::Dropout,
        OpKind::Dice,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::AddBias => "add_bias",
            OpKind::Scale => "scale",
            OpKind::SumAll => "sum_all",
            OpKind::MatMul => "matmul",
            OpKind::Conv2d => "conv2d",
            OpKind::Relu => "relu",
            OpKind::Gelu => "gelu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::BatchNorm => "batch_norm",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Softmax => "softmax_last",
            OpKind::MaxPool => "max_pool",
            OpKind::Upsample => "upsample",
            OpKind::Reshape => "reshape",
            OpKind::Permute => "permute",
            OpKind::Concat => "concat",
            OpKind::Narrow => "narrow",
            OpKind::Dropout => "dropout",
            OpKind::Dice => "dice_loss",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::DIFFERENTIABLE.into_iter().find(|k| k.name() == name)
    }
}

pub(crate) enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddBias { x: usize, bias: usize },
    Scale(usize, T),
    SumAll(usize),
    MatMul { a: usize, b: usize, plan: BatchPlan },
    Conv2d { x: usize, w: usize, bias: Option<usize>, geom: ConvGeom },
    Relu(usize),
    Gelu(usize),
    Sigmoid(usize),
    BatchNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<T>, inv_std: Vec<T>, train: bool },
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<T>, inv_std: Vec<T> },
    Softmax(usize),
    MaxPool { x: usize, argmax: Vec<usize> },
    Upsample { x: usize, factor: usize, mode: UpsampleMode },
    Reshape(usize),
    Permute { x: usize, perm: Vec<usize> },
    Concat { parts: Vec<usize>, axis: usize },
    Narrow { x: usize, axis: usize, start: usize },
    Dropout { x: usize, mask: Vec<T> },
    Dice { pred: usize, target: Vec<T>, eps: T, rows: usize },
}

impl<T> Op<T> {
    pub(crate) fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::AddBias { .. } => OpKind::AddBias,
            Op::Scale(..) => OpKind::Scale,
            Op::SumAll(..) => OpKind::SumAll,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Relu(..) => OpKind::Relu,
            Op::Gelu(..) => OpKind::Gelu,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::BatchNorm { .. } => OpKind::BatchNorm,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Softmax(..) => OpKind::Softmax,
            Op::MaxPool { .. } => OpKind::MaxPool,
            Op::Upsample { .. } => OpKind::Upsample,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Permute { .. } => OpKind::Permute,
            Op::Concat { .. } => OpKind::Concat,
            Op::Narrow { .. } => OpKind::Narrow,
            Op::Dropout { .. } => OpKind::Dropout,
            Op::Dice { .. } => OpKind::Dice,
        }
    }

    fn parents(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::AddBias { x, bias } => vec![*x, *bias],
            Op::Scale(a, _) | Op::SumAll(a) | Op::Relu(a) | Op::Gelu(a) | Op::Sigmoid(a) => vec![*a],
            Op::Softmax(a) | Op::Reshape(a) => vec![*a],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Conv2d { x, w, bias, .. } => {
                let mut v = vec![*x, *w];
                v.extend(bias);
                v
            }
            Op::BatchNorm { x, gamma, beta, .. } | Op::LayerNorm { x, gamma, beta, .. } => {
                vec![*x, *gamma, *beta]
            }
            Op::MaxPool { x, .. } | Op::Upsample { x, .. } | Op::Permute { x, .. } | Op::Narrow { x, .. } | Op::Dropout { x, .. } => {
                vec![*x]
            }
            Op::Concat { parts, .. } => parts.clone(),
            Op::Dice { pred, .. } => vec![*pred],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    leaf_grads: Vec<Option<Tensor<T>>>,
    backward_done: bool,
    macs: BTreeMap<&'static str, u64>,
    fault: Option<OpKind>,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradient contributions to a node's parents.
pub(crate) type Contribs<T> = Vec<(usize, Vec<T>)>;

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), leaf_grads: Vec::new(), backward_done: false, macs: BTreeMap::new(), fault: None }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Test hook: negates the input gradient produced by every `kind` node.
    pub fn inject_fault(&mut self, kind: Option<OpKind>) {
        self.fault = kind;
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op.kind().name() });
        }
        let needs_grad = op.parents().iter().any(|&p| self.nodes[p].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub(crate) fn needs(&self, idx: usize) -> bool {
        self.nodes[idx].needs_grad
    }

    pub(crate) fn val(&self, idx: usize) -> &Tensor<T> {
        &self.nodes[idx].value
    }

    pub(crate) fn count_macs(&mut self, counter: &'static str, macs: u64) {
        *self.macs.entry(counter).or_insert(0) += macs;
    }

    /// Multiply-accumulates recorded under `counter`.
    pub fn macs(&self, counter: &str) -> u64 {
        self.macs.get(counter).copied().unwrap_or(0)
    }

    /// Gradient of the loss with respect to leaf `v`, after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaf_grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.leaf_grads.get_mut(v.0).and_then(Option::take)
    }

    pub fn reset_grads(&mut self) {
        self.leaf_grads.clear();
        self.backward_done = false;
    }

    /// Populates gradients of `loss` for every leaf that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        let shape = self.shape(loss).to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarLoss(shape));
        }
        self.backward_done = true;
        self.leaf_grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].needs_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                let shape = self.nodes[i].value.shape().to_vec();
                self.leaf_grads[i] = Some(Tensor::from_parts(shape, g));
                continue;
            }
            let mut contribs = self.backward_node(i, &g);
            if self.fault == Some(self.nodes[i].op.kind()) {
                for (_, c) in contribs.iter_mut().take(1) {
                    c.iter_mut().for_each(|v| *v = -*v);
                }
            }
            for (p, c) in contribs {
                if !self.nodes[p].needs_grad {
                    continue;
                }
                match &mut grads[p] {
                    Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(c),
                }
            }
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[T]) -> Contribs<T> {
        use crate::ops::*;
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|&v| -v).collect())],
            Op::Mul(a, b) => elementwise::mul_backward(self, *a, *b, g),
            Op::AddBias { x, bias } => elementwise::add_bias_backward(self, *x, *bias, g),
            Op::Scale(a, c) => vec![(*a, g.iter().map(|&v| v * *c).collect())],
            Op::SumAll(a) => vec![(*a, vec![g[0]; self.val(*a).numel()])],
            Op::MatMul { a, b, plan } => linalg::matmul_backward(self, *a, *b, plan, g),
            Op::Conv2d { x, w, bias, geom } => conv::conv2d_backward(self, *x, *w, *bias, geom, g),
            Op::Relu(a) => elementwise::relu_backward(self, *a, g),
            Op::Gelu(a) => elementwise::gelu_backward(self, *a, g),
            Op::Sigmoid(a) => vec![(*a, g.iter().zip(y).map(|(&g, &s)| g * s * (T::one() - s)).collect())],
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                norm::batch_norm_backward(self, *x, *gamma, *beta, xhat, inv_std, *train, g)
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => norm::layer_norm_backward(self, *x, *gamma, *beta, xhat, inv_std, g),
            Op::Softmax(a) => elementwise::softmax_backward(node.value.shape(), *a, y, g),
            Op::MaxPool { x, argmax } => pool::max_pool_backward(self, *x, argmax, g),
            Op::Upsample { x, factor, mode } => pool::upsample_backward(self, *x, *factor, *mode, g),
            Op::Reshape(a) => vec![(*a, g.to_vec())],
            Op::Permute { x, perm } => shape::permute_backward(self, *x, perm, g),
            Op::Concat { parts, axis } => shape::concat_backward(self, parts, *axis, g),
            Op::Narrow { x, axis, start } => shape::narrow_backward(self, *x, *axis, *start, g),
            Op::Dropout { x, mask } => vec![(*x, g.iter().zip(mask).map(|(&g, &m)| g * m).collect())],
            Op::Dice { pred, target, eps, rows } => loss::dice_backward(self, *pred, target, *eps, *rows, g),
        }
    }
}
