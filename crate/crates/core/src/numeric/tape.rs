use std::borrow::Cow;

use crate::error::{Error, Result};

use super::ops;
use super::Tensor;

/// Handle to a value recorded on a [`Tape`].
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
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    },
    Depthwise {
        input: Var,
        kernel: Var,
        bias: Var,
        multiplier: usize,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Concat(Vec<Var>),
    GlobalAvgPool(Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        label: usize,
    },
    L2Distance(Var, Var),
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records primitive operations in execution order for one reverse sweep.
///
/// Parameters are recorded by reference ([`Tape::param`]), so binding a
/// model to a tape copies nothing. Nodes are appended only after their
/// inputs exist, so the node list is always topologically sorted.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// `None` for frozen values and values the loss does not depend on.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Accumulates the gradient of `var` into `tensor.grad`.
    pub fn attach(&self, var: Var, tensor: &mut Tensor) -> Result<()> {
        if !tensor.requires_grad {
            return Ok(());
        }
        match self.get(var) {
            Some(g) => tensor.accumulate_grad(g),
            None => Ok(()),
        }
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, requires_grad: bool) -> Result<Var> {
        value.check_finite(op_name(&op))?;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn derived(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(Cow::Owned(value), op, rg)
    }

    /// Records a borrowed tensor; it is differentiable iff `requires_grad`.
    pub fn param(&mut self, tensor: &'a Tensor) -> Result<Var> {
        let rg = tensor.requires_grad;
        self.push(Cow::Borrowed(tensor), Op::Leaf, rg)
    }

    /// Records an owned tensor; it is differentiable iff `requires_grad`.
    pub fn input(&mut self, tensor: Tensor) -> Result<Var> {
        let rg = tensor.requires_grad;
        self.push(Cow::Owned(tensor), Op::Leaf, rg)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Result<Var> {
        self.push(Cow::Owned(tensor), Op::Leaf, false)
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let out = ops::conv2d(
            self.value(input),
            self.value(kernel),
            self.value(bias),
            stride,
            pad,
        )?;
        let op = Op::Conv2d {
            input,
            kernel,
            bias,
            stride,
            pad,
        };
        self.derived(out, op, &[input, kernel, bias])
    }

    pub fn depthwise_conv2d(&mut self, input: Var, kernel: Var, bias: Var, multiplier: usize) -> Result<Var> {
        let out = ops::depthwise_conv2d(
            self.value(input),
            self.value(kernel),
            self.value(bias),
            multiplier,
        )?;
        let op = Op::Depthwise {
            input,
            kernel,
            bias,
            multiplier,
        };
        self.derived(out, op, &[input, kernel, bias])
    }

    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let out = ops::linear(self.value(input), self.value(weight), self.value(bias))?;
        self.derived(out, Op::Linear { input, weight, bias }, &[input, weight, bias])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::add(self.value(a), self.value(b))?;
        self.derived(out, Op::Add(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::mul(self.value(a), self.value(b))?;
        self.derived(out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let out = ops::scale(self.value(a), factor);
        self.derived(out, Op::Scale(a, factor), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = ops::relu(self.value(a));
        self.derived(out, Op::Relu(a), &[a])
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&v| self.value(v)).collect();
        let out = ops::concat(&values)?;
        self.derived(out, Op::Concat(parts.to_vec()), parts)
    }

    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let out = ops::global_avg_pool(self.value(a))?;
        self.derived(out, Op::GlobalAvgPool(a), &[a])
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.value(a).data().iter().sum();
        self.derived(Tensor::scalar(total), Op::Sum(a), &[a])
    }

    /// Sum of several scalars (or equal-shaped tensors).
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let (&first, rest) = terms
            .split_first()
            .ok_or_else(|| Error::InvalidArgument("add_all of zero terms".into()))?;
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }

    /// `-log softmax(logits)[label]` as a scalar.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let ce = ops::cross_entropy(self.value(logits).data(), label)?;
        self.derived(Tensor::scalar(ce), Op::CrossEntropy { logits, label }, &[logits])
    }

    /// Cross-entropy against an explicit one-hot target.
    pub fn softmax_cross_entropy(&mut self, logits: Var, one_hot: &Tensor) -> Result<Var> {
        if self.value(logits).shape() != one_hot.shape() {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!(
                    "logits {:?} vs target {:?}",
                    self.value(logits).shape(),
                    one_hot.shape()
                ),
            ));
        }
        let label = ops::one_hot_index(one_hot.data())?;
        self.cross_entropy(logits, label)
    }

    pub fn l2_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = ops::l2_distance(self.value(a), self.value(b))?;
        self.derived(Tensor::scalar(d), Op::L2Distance(a, b), &[a, b])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::EmptyTape);
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::InvalidArgument(format!("{loss:?} is not on this tape")));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, delta: Vec<f64>| match &mut grads[v.0] {
            Some(existing) => existing.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
            slot @ None => *slot = Some(delta),
        };
        match &self.nodes[idx].op {
            Op::Leaf => {}
            &Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                pad,
            } => {
                let (di, dk, db) = ops::conv2d_backward(
                    self.value(input),
                    self.value(kernel),
                    g,
                    stride,
                    pad,
                    [rg(input), rg(kernel), rg(bias)],
                );
                if let Some(d) = di {
                    acc(input, d);
                }
                if let Some(d) = dk {
                    acc(kernel, d);
                }
                if let Some(d) = db {
                    acc(bias, d);
                }
            }
            &Op::Depthwise {
                input,
                kernel,
                bias,
                multiplier,
            } => {
                let (di, dk, db) = ops::depthwise_backward(
                    self.value(input),
                    self.value(kernel),
                    g,
                    multiplier,
                    [rg(input), rg(kernel), rg(bias)],
                );
                if let Some(d) = di {
                    acc(input, d);
                }
                if let Some(d) = dk {
                    acc(kernel, d);
                }
                if let Some(d) = db {
                    acc(bias, d);
                }
            }
            &Op::Linear { input, weight, bias } => {
                let x = self.value(input).data();
                let w = self.value(weight);
                let d = x.len();
                if rg(weight) {
                    let dw = g.iter().flat_map(|gk| x.iter().map(move |xi| gk * xi)).collect();
                    acc(weight, dw);
                }
                if rg(bias) {
                    acc(bias, g.to_vec());
                }
                if rg(input) {
                    let mut dx = vec![0.0; d];
                    for (row, gk) in w.data().chunks(d).zip(g) {
                        dx.iter_mut().zip(row).for_each(|(a, wv)| *a += gk * wv);
                    }
                    acc(input, dx);
                }
            }
            &Op::Add(a, b) => {
                if rg(a) {
                    acc(a, g.to_vec());
                }
                if rg(b) {
                    acc(b, g.to_vec());
                }
            }
            &Op::Mul(a, b) => {
                let (va, vb) = (self.value(a).data(), self.value(b).data());
                if rg(a) {
                    acc(a, g.iter().zip(vb).map(|(x, y)| x * y).collect());
                }
                if rg(b) {
                    acc(b, g.iter().zip(va).map(|(x, y)| x * y).collect());
                }
            }
            &Op::Scale(a, factor) => acc(a, g.iter().map(|v| v * factor).collect()),
            &Op::Relu(a) => {
                let x = self.value(a).data();
                let d = g
                    .iter()
                    .zip(x)
                    .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                acc(a, d);
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if rg(p) {
                        acc(p, g[offset..offset + n].to_vec());
                    }
                    offset += n;
                }
            }
            &Op::GlobalAvgPool(a) => {
                let x = self.value(a);
                let plane = x.numel() / x.shape()[0];
                let inv = 1.0 / plane as f64;
                let d = g
                    .iter()
                    .flat_map(|gc| std::iter::repeat_n(gc * inv, plane))
                    .collect();
                acc(a, d);
            }
            &Op::Sum(a) => acc(a, vec![g[0]; self.value(a).numel()]),
            &Op::CrossEntropy { logits, label } => {
                let mut d = ops::softmax(self.value(logits).data());
                d[label] -= 1.0;
                d.iter_mut().for_each(|v| *v *= g[0]);
                acc(logits, d);
            }
            &Op::L2Distance(a, b) => {
                let dist = self.nodes[idx].value.item();
                if dist == 0.0 {
                    // Subgradient 0 at the kink.
                    return;
                }
                let coeff = g[0] / dist;
                let diff: Vec<f64> = self
                    .value(a)
                    .data()
                    .iter()
                    .zip(self.value(b).data())
                    .map(|(x, y)| coeff * (x - y))
                    .collect();
                if rg(b) {
                    acc(b, diff.iter().map(|v| -v).collect());
                }
                if rg(a) {
                    acc(a, diff);
                }
            }
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Conv2d { .. } => "conv2d",
        Op::Depthwise { .. } => "depthwise_conv2d",
        Op::Linear { .. } => "linear",
        Op::Add(..) => "add",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::Relu(_) => "relu",
        Op::Concat(_) => "concat",
        Op::GlobalAvgPool(_) => "global_avg_pool",
        Op::Sum(_) => "sum",
        Op::CrossEntropy { .. } => "cross_entropy",
        Op::L2Distance(..) => "l2_distance",
    }
}
