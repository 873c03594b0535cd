//! Reverse-mode autodiff over the fixed op set.
//!
//! A [`Tape`] records every op in execution order together with the inputs
//! its backward rule needs. [`Tape::backward`] walks the records in exact
//! reverse order. Parameters are leaves tagged with a [`ParamId`]; their
//! gradients are collected into [`Gradients`] by id, summed over every use.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::kernels::groupnorm::{GroupNormSpec, GroupStats};
use crate::kernels::pool::WorkerPool;
use crate::numerics::{fake_quant, ste_mask, QuantParams};
use crate::tensor::{ops, Tensor};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    index: usize,
    tape: u64,
}

/// Stable identifier of a trainable parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

enum Op {
    Leaf,
    Linear { x: usize, w: usize, b: Option<usize> },
    Conv { x: usize, w: usize, b: Option<usize>, stride: usize, padding: usize },
    Silu(usize),
    Softmax { x: usize, axis: usize },
    Add(usize, usize),
    MulScalar(usize, f32),
    AddChannelBias { x: usize, b: usize },
    Mse { a: usize, b: usize },
    Sum(usize),
    Concat { parts: Vec<usize>, axis: usize },
    Upsample(usize),
    Permute { x: usize, perm: Vec<usize> },
    Reshape(usize),
    GroupNorm { x: usize, gamma: usize, beta: usize, groups: usize, stats: GroupStats },
    Attention { q: usize, k: usize, v: usize },
    FakeQuant { x: usize, mask: Vec<f32> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    pool: WorkerPool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new(WorkerPool::single())
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    nodes: Vec<Option<Tensor>>,
    params: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. a recorded value, if it was reached.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.nodes.get(v.index).and_then(Option::as_ref)
    }

    /// Gradient w.r.t. a parameter, summed over all its uses on the tape.
    /// Parameters that were recorded but not reached get zeros.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }
}

impl Tape {
    pub fn new(pool: WorkerPool) -> Self {
        Self { id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed), nodes: Vec::new(), pool }
    }

    pub fn pool(&self) -> &WorkerPool {
        &self.pool
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad, param: None });
        Var { index: self.nodes.len() - 1, tape: self.id }
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::Autodiff("value belongs to a different tape".into()));
        }
        Ok(v.index)
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable leaf that is not a parameter (e.g. an input under test).
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn param(&mut self, value: Tensor, id: ParamId) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.nodes[v.index].param = Some(id);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "value belongs to a different tape");
        &self.nodes[v.index].value
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xi, wi) = (self.idx(x)?, self.idx(w)?);
        let bi = b.map(|b| self.idx(b)).transpose()?;
        let out = ops::linear(&self.nodes[xi].value, &self.nodes[wi].value, bi.map(|b| &self.nodes[b].value))?;
        let rg = self.rg(xi) || self.rg(wi) || bi.is_some_and(|b| self.rg(b));
        Ok(self.push(out, Op::Linear { x: xi, w: wi, b: bi }, rg))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (xi, wi) = (self.idx(x)?, self.idx(w)?);
        let bi = b.map(|b| self.idx(b)).transpose()?;
        let out = ops::conv2d(
            &self.nodes[xi].value,
            &self.nodes[wi].value,
            bi.map(|b| &self.nodes[b].value),
            stride,
            padding,
        )?;
        let rg = self.rg(xi) || self.rg(wi) || bi.is_some_and(|b| self.rg(b));
        Ok(self.push(out, Op::Conv { x: xi, w: wi, b: bi, stride, padding }, rg))
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let out = ops::silu(&self.nodes[xi].value);
        Ok(self.push(out, Op::Silu(xi), self.rg(xi)))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xi = self.idx(x)?;
        let out = ops::softmax(&self.nodes[xi].value, axis)?;
        Ok(self.push(out, Op::Softmax { x: xi, axis }, self.rg(xi)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let out = ops::add(&self.nodes[ai].value, &self.nodes[bi].value)?;
        let rg = self.rg(ai) || self.rg(bi);
        Ok(self.push(out, Op::Add(ai, bi), rg))
    }

    pub fn mul_scalar(&mut self, x: Var, s: f32) -> Result<Var> {
        let xi = self.idx(x)?;
        let out = ops::mul_scalar(&self.nodes[xi].value, s);
        Ok(self.push(out, Op::MulScalar(xi, s), self.rg(xi)))
    }

    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xi, bi) = (self.idx(x)?, self.idx(b)?);
        let out = ops::add_channel_bias(&self.nodes[xi].value, &self.nodes[bi].value)?;
        let rg = self.rg(xi) || self.rg(bi);
        Ok(self.push(out, Op::AddChannelBias { x: xi, b: bi }, rg))
    }

    /// Scalar mean squared error.
    pub fn mse_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let out = ops::mse_loss(&self.nodes[ai].value, &self.nodes[bi].value)?;
        let rg = self.rg(ai) || self.rg(bi);
        Ok(self.push(Tensor::scalar(out), Op::Mse { a: ai, b: bi }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let out = ops::sum(&self.nodes[xi].value);
        Ok(self.push(Tensor::scalar(out), Op::Sum(xi), self.rg(xi)))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let idx = parts.iter().map(|&p| self.idx(p)).collect::<Result<Vec<_>>>()?;
        let values: Vec<&Tensor> = idx.iter().map(|&i| &self.nodes[i].value).collect();
        let out = ops::concat(&values, axis)?;
        let rg = idx.iter().any(|&i| self.rg(i));
        Ok(self.push(out, Op::Concat { parts: idx, axis }, rg))
    }

    pub fn upsample_nearest2x(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let out = ops::upsample_nearest2x(&self.nodes[xi].value)?;
        Ok(self.push(out, Op::Upsample(xi), self.rg(xi)))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let xi = self.idx(x)?;
        let out = ops::permute(&self.nodes[xi].value, perm)?;
        Ok(self.push(out, Op::Permute { x: xi, perm: perm.to_vec() }, self.rg(xi)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xi = self.idx(x)?;
        let out = self.nodes[xi].value.reshape(shape.to_vec())?;
        Ok(self.push(out, Op::Reshape(xi), self.rg(xi)))
    }

    /// GroupNorm with learnable `gamma[C]` and `beta[C]`.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f32) -> Result<Var> {
        let (xi, gi, bi) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        let c = self.nodes[gi].value.numel();
        let spec = GroupNormSpec::new(
            c,
            groups,
            eps,
            self.nodes[gi].value.data().to_vec(),
            self.nodes[bi].value.data().to_vec(),
        )?;
        let (out, stats) = ops::group_norm(&self.nodes[xi].value, &spec, &self.pool)?;
        let rg = self.rg(xi) || self.rg(gi) || self.rg(bi);
        Ok(self.push(out, Op::GroupNorm { x: xi, gamma: gi, beta: bi, groups, stats }, rg))
    }

    /// Multi-head attention over `[N, heads, L, d]` operands.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let (qi, ki, vi) = (self.idx(q)?, self.idx(k)?, self.idx(v)?);
        let out = ops::attention(&self.nodes[qi].value, &self.nodes[ki].value, &self.nodes[vi].value, &self.pool)?;
        let rg = self.rg(qi) || self.rg(ki) || self.rg(vi);
        Ok(self.push(out, Op::Attention { q: qi, k: ki, v: vi }, rg))
    }

    /// Quantize-dequantize with a clipped straight-through gradient.
    pub fn fake_quant(&mut self, x: Var, params: &QuantParams) -> Result<Var> {
        let xi = self.idx(x)?;
        let out = fake_quant(&self.nodes[xi].value, params)?;
        let mask = if self.rg(xi) { ste_mask(&self.nodes[xi].value, params)? } else { Vec::new() };
        Ok(self.push(out, Op::FakeQuant { x: xi, mask }, self.rg(xi)))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.tape != self.id || loss.index >= self.nodes.len() {
            return Err(Error::Autodiff("loss was not produced on this tape".into()));
        }
        if !self.nodes[loss.index].value.is_scalar() {
            return Err(Error::Autodiff(format!(
                "loss must be a scalar, got shape {:?}",
                self.nodes[loss.index].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.index] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.index).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            let contributions = self.node_backward(node, &dy)?;
            // Leaves keep their gradient; intermediates are dropped once consumed.
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(dy);
            }
            for (j, g) in contributions {
                if !self.nodes[j].requires_grad {
                    continue;
                }
                accumulate(&mut grads[j], g);
            }
        }

        let mut params: BTreeMap<ParamId, Tensor> = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Some(pid) = node.param {
                let g = grads[i].clone().unwrap_or_else(|| zeros_like(&node.value));
                match params.get_mut(&pid) {
                    Some(acc) => add_into(acc, &g),
                    None => {
                        params.insert(pid, g);
                    }
                }
            }
        }
        Ok(Gradients { tape: self.id, nodes: grads, params })
    }

    fn node_backward(&self, node: &Node, dy: &Tensor) -> Result<Vec<(usize, Tensor)>> {
        let val = |i: usize| &self.nodes[i].value;
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            &Op::Linear { x, w, b } => {
                let (dx, dw, db) = ops::linear_backward(val(x), val(w), dy);
                let mut out = vec![(x, dx), (w, dw)];
                if let Some(b) = b {
                    out.push((b, db.reshape(val(b).shape().to_vec())?));
                }
                out
            }
            &Op::Conv { x, w, b, stride, padding } => {
                let (dx, dw, db) = ops::conv2d_backward(val(x), val(w), dy, stride, padding)?;
                let mut out = vec![(x, dx), (w, dw)];
                if let Some(b) = b {
                    out.push((b, db.reshape(val(b).shape().to_vec())?));
                }
                out
            }
            &Op::Silu(x) => vec![(x, ops::silu_backward(val(x), dy))],
            &Op::Softmax { x, axis } => vec![(x, ops::softmax_backward(&node.value, dy, axis)?)],
            &Op::Add(a, b) => vec![(a, dy.clone()), (b, dy.clone())],
            &Op::MulScalar(x, s) => vec![(x, ops::mul_scalar(dy, s))],
            &Op::AddChannelBias { x, b } => vec![(x, dy.clone()), (b, ops::channel_sums(dy))],
            &Op::Mse { a, b } => {
                let g = dy.item()?;
                let da = ops::mse_backward(val(a), val(b), g);
                let db = ops::mul_scalar(&da, -1.0);
                vec![(a, da), (b, db)]
            }
            &Op::Sum(x) => vec![(x, Tensor::full(val(x).shape().to_vec(), dy.item()?)?)],
            Op::Concat { parts, axis } => {
                let sizes: Vec<usize> = parts.iter().map(|&p| val(p).shape()[*axis]).collect();
                parts.iter().copied().zip(ops::split(dy, *axis, &sizes)).collect()
            }
            &Op::Upsample(x) => vec![(x, ops::upsample_nearest2x_backward(dy))],
            Op::Permute { x, perm } => vec![(*x, ops::permute(dy, &ops::inverse_permutation(perm))?)],
            &Op::Reshape(x) => vec![(x, dy.reshape(val(x).shape().to_vec())?)],
            Op::GroupNorm { x, gamma, beta, groups, stats } => {
                let (dx, dg, db) = ops::group_norm_backward(val(*x), val(*gamma).data(), *groups, stats, dy);
                vec![
                    (*x, dx),
                    (*gamma, dg.reshape(val(*gamma).shape().to_vec())?),
                    (*beta, db.reshape(val(*beta).shape().to_vec())?),
                ]
            }
            &Op::Attention { q, k, v } => {
                let (dq, dk, dv) = ops::attention_backward(val(q), val(k), val(v), dy);
                vec![(q, dq), (k, dk), (v, dv)]
            }
            Op::FakeQuant { x, mask } => {
                let data = dy.data().iter().zip(mask).map(|(g, m)| g * m).collect();
                vec![(*x, Tensor::from_parts(dy.shape().to_vec(), data))]
            }
        })
    }
}

fn zeros_like(t: &Tensor) -> Tensor {
    Tensor::from_parts(t.shape().to_vec(), vec![0.0; t.numel()])
}

fn add_into(acc: &mut Tensor, g: &Tensor) {
    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
        *a += b;
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => add_into(acc, &g),
        None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_param_has_unit_gradient() {
        let mut tape = Tape::default();
        let x = tape.param(Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap(), ParamId(0));
        let loss = tape.sum(x).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.param(ParamId(0)).unwrap().data().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn scalar_mse_hand_gradient() {
        // d/dw mse(w*x, y) = 2x(wx - y) for scalars.
        let (w0, x0, y0) = (1.5f32, 2.0f32, 1.0f32);
        let mut tape = Tape::default();
        let w = tape.param(Tensor::new(vec![1, 1], vec![w0]).unwrap(), ParamId(7));
        let x = tape.constant(Tensor::new(vec![1, 1], vec![x0]).unwrap());
        let y = tape.constant(Tensor::new(vec![1, 1], vec![y0]).unwrap());
        let wx = tape.linear(x, w, None).unwrap();
        let loss = tape.mse_loss(wx, y).unwrap();
        let g = tape.backward(loss).unwrap().param(ParamId(7)).unwrap().data()[0];
        assert_eq!(g, 2.0 * x0 * (w0 * x0 - y0));
    }

    #[test]
    fn rejects_non_scalar_and_foreign_loss() {
        let mut a = Tape::default();
        let x = a.input(Tensor::zeros(vec![2]).unwrap());
        assert!(matches!(a.backward(x), Err(Error::Autodiff(_))));
        let mut b = Tape::default();
        let y = b.input(Tensor::scalar(1.0));
        assert!(matches!(a.backward(y), Err(Error::Autodiff(_))));
        assert!(a.silu(y).is_err());
    }

    #[test]
    fn reused_param_accumulates_and_unreached_is_zero() {
        let mut tape = Tape::default();
        let p = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let a = tape.param(p.clone(), ParamId(0));
        let b = tape.param(p.clone(), ParamId(0));
        let _unused = tape.param(p, ParamId(1));
        let s = tape.add(a, b).unwrap();
        let loss = tape.sum(s).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.param(ParamId(0)).unwrap().data(), &[2.0, 2.0, 2.0]);
        assert_eq!(grads.param(ParamId(1)).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn fake_quant_gradient_is_clipped_identity() {
        let params = QuantParams::per_tensor(0.1).unwrap();
        let mut tape = Tape::default();
        let x = tape.input(Tensor::new(vec![3], vec![0.3, -12.7, 127.0]).unwrap());
        let q = tape.fake_quant(x, &params).unwrap();
        let loss = tape.sum(q).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 0.0]);
    }
}
