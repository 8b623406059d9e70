//! Reverse-mode differentiation over a per-forward-pass tape.
//!
//! Every operation appends a node holding its value and the handles of its
//! inputs. [`Tape::backward`] walks the nodes in reverse and returns first
//! order gradients for every node that depends on a parameter.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::ops;
use crate::params::ParamRegistry;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    Conv1x1 { x: Var, w: Var, b: Option<Var> },
    Linear { x: Var, w: Var, b: Option<Var> },
    Matmul { a: Var, b: Var },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    ChannelAffine { x: Var, scale: Var, shift: Var },
    GlobalAvgPool(Var),
    Bilinear { x: Var, h: usize, w: usize },
    Reshape(Var),
    Concat(Vec<Var>),
    GatedMix { alpha: Var, a: Var, b: Var },
    Gather { x: Var, indices: Vec<Vec<usize>> },
    Propagate { l: Tensor, x: Var },
    SoftmaxCe { logits: Var, labels: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
    param_index: HashMap<String, Var>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A constant input; no gradient is tracked through it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A trainable leaf with no registry name.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Bind a registry parameter, reusing the handle if already bound.
    pub fn param(&mut self, registry: &ParamRegistry, name: &str) -> Result<Var> {
        if let Some(&v) = self.param_index.get(name) {
            return Ok(v);
        }
        let t = registry
            .get(name)
            .ok_or_else(|| Error::config(format!("unknown parameter {name:?}")))?;
        let value = Tensor::from_parts(t.shape().to_vec(), t.data().to_vec());
        let v = self.push(value, Op::Leaf, true);
        self.params.push((name.to_string(), v));
        self.param_index.insert(name.to_string(), v);
        Ok(v)
    }

    /// Parameters bound so far, in binding order.
    pub fn bound_params(&self) -> &[(String, Var)] {
        &self.params
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let value = ops::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.needs(&deps);
        Ok(self.push(value, Op::Conv2d { x, w, b, stride, pad }, ng))
    }

    pub fn conv1x1(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let value = ops::conv1x1(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.needs(&deps);
        Ok(self.push(value, Op::Conv1x1 { x, w, b }, ng))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let value = ops::linear(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.needs(&deps);
        Ok(self.push(value, Op::Linear { x, w, b }, ng))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::matmul(self.value(a), self.value(b))?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(value, Op::Matmul { a, b }, ng))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = ops::relu(self.value(x));
        let ng = self.needs(&[x]);
        self.push(value, Op::Relu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = ops::sigmoid(self.value(x));
        let ng = self.needs(&[x]);
        self.push(value, Op::Sigmoid(x), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::add(self.value(a), self.value(b))?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), ng))
    }

    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let value = ops::channel_affine(self.value(x), self.value(scale), self.value(shift))?;
        let ng = self.needs(&[x, scale, shift]);
        Ok(self.push(value, Op::ChannelAffine { x, scale, shift }, ng))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let value = ops::global_avg_pool(self.value(x))?;
        let ng = self.needs(&[x]);
        Ok(self.push(value, Op::GlobalAvgPool(x), ng))
    }

    pub fn bilinear_upsample(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let value = ops::bilinear_upsample(self.value(x), h, w)?;
        let ng = self.needs(&[x]);
        Ok(self.push(value, Op::Bilinear { x, h, w }, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let ng = self.needs(&[x]);
        Ok(self.push(value, Op::Reshape(x), ng))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&v| self.value(v)).collect();
        let value = ops::concat_axis1(&tensors)?;
        let ng = self.needs(parts);
        Ok(self.push(value, Op::Concat(parts.to_vec()), ng))
    }

    pub fn gated_mix(&mut self, alpha: Var, a: Var, b: Var) -> Result<Var> {
        let value = ops::gated_mix(self.value(alpha), self.value(a), self.value(b))?;
        let ng = self.needs(&[alpha, a, b]);
        Ok(self.push(value, Op::GatedMix { alpha, a, b }, ng))
    }

    pub fn gather_positions(&mut self, x: Var, indices: Vec<Vec<usize>>) -> Result<Var> {
        let value = ops::gather_positions(self.value(x), &indices)?;
        let ng = self.needs(&[x]);
        Ok(self.push(value, Op::Gather { x, indices }, ng))
    }

    /// Left-multiply node features `[N,K,C]` by constant matrices `[N,K,K]`.
    pub fn propagate(&mut self, l: Tensor, x: Var) -> Result<Var> {
        let value = ops::batched_left_matmul(&l, self.value(x))?;
        let ng = self.needs(&[x]);
        Ok(self.push(value, Op::Propagate { l, x }, ng))
    }

    /// Mean softmax cross-entropy as a one-element node.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let loss = ops::softmax_cross_entropy(self.value(logits), labels)?;
        let ng = self.needs(&[logits]);
        Ok(self.push(Tensor::scalar(loss), Op::SoftmaxCe { logits, labels: labels.to_vec() }, ng))
    }

    /// Gradients of the one-element node `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        let root = self.value(loss);
        if root.numel() != 1 {
            return Err(Error::config(format!("backward needs a scalar, got shape {:?}", root.shape())));
        }
        if !root.is_finite() {
            return Err(Error::numeric(format!("loss is not finite ({})", root.item())));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let mut send = |v: Var, d: Vec<f64>| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&d).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(d),
                }
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Conv2d { x, w, b, stride, pad } => {
                    let (dx, dw, db) = ops::conv2d_backward(self.value(*x), self.value(*w), *stride, *pad, &g);
                    send(*x, dx);
                    send(*w, dw);
                    if let Some(b) = b {
                        send(*b, db);
                    }
                }
                Op::Conv1x1 { x, w, b } => {
                    let (dx, dw, db) = ops::conv1x1_backward(self.value(*x), self.value(*w), &g);
                    send(*x, dx);
                    send(*w, dw);
                    if let Some(b) = b {
                        send(*b, db);
                    }
                }
                Op::Linear { x, w, b } => {
                    let (dx, dw, db) = ops::linear_backward(self.value(*x), self.value(*w), &g);
                    send(*x, dx);
                    send(*w, dw);
                    if let Some(b) = b {
                        send(*b, db);
                    }
                }
                Op::Matmul { a, b } => {
                    let (da, db) = ops::matmul_backward(self.value(*a), self.value(*b), &g);
                    send(*a, da);
                    send(*b, db);
                }
                Op::Relu(x) => send(*x, ops::relu_backward(self.value(*x), &g)),
                Op::Sigmoid(x) => send(*x, ops::sigmoid_backward(&node.value, &g)),
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::ChannelAffine { x, scale, shift } => {
                    let (dx, ds, dt) = ops::channel_affine_backward(self.value(*x), self.value(*scale), &g);
                    send(*x, dx);
                    send(*scale, ds);
                    send(*shift, dt);
                }
                Op::GlobalAvgPool(x) => send(*x, ops::global_avg_pool_backward(self.shape(*x), &g)),
                Op::Bilinear { x, h, w } => {
                    send(*x, ops::bilinear_upsample_backward(self.shape(*x), *h, *w, &g))
                }
                Op::Reshape(x) => send(*x, g),
                Op::Concat(parts) => {
                    let shapes: Vec<Vec<usize>> = parts.iter().map(|&v| self.shape(v).to_vec()).collect();
                    for (v, d) in parts.iter().zip(ops::concat_axis1_backward(&shapes, &g)) {
                        send(*v, d);
                    }
                }
                Op::GatedMix { alpha, a, b } => {
                    let (dg, da, db) =
                        ops::gated_mix_backward(self.value(*alpha), self.value(*a), self.value(*b), &g);
                    send(*alpha, dg);
                    send(*a, da);
                    send(*b, db);
                }
                Op::Gather { x, indices } => {
                    send(*x, ops::gather_positions_backward(self.shape(*x), indices, &g))
                }
                Op::Propagate { l, x } => send(*x, ops::batched_left_matmul_backward(l, self.shape(*x), &g)),
                Op::SoftmaxCe { logits, labels } => {
                    send(*logits, ops::softmax_cross_entropy_backward(self.value(*logits), labels, g[0]))
                }
            }
        }
        Ok(Grads { grads })
    }
}
