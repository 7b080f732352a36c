use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{self, conv_out_len};
use super::ops::{self, BatchNormCache};
use super::Tensor;
use crate::error::{Error, Result};
use crate::math;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRowBias(Var, Var),
    AddChannelBias(Var, Var),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Relu(Var),
    Conv1d { x: Var, w: Var, stride: usize },
    Conv2d { x: Var, w: Var, stride: usize },
    MeanTrailing(Var),
    MeanRows(Var),
    MeanMiddle(Var),
    Reshape(Var),
    Stack(Vec<Var>),
    Concat(Vec<Var>),
    Row(Var, usize),
    Element(Var, usize),
    Exclude(Var, usize),
    Sum(Var),
    Dot(Var, Var),
    BatchNorm { x: Var, gamma: Var, cache: BatchNormCache, beta: Var },
    L2Normalize { x: Var, norm: f64 },
    LogSumExp(Var),
    SoftCrossEntropy { logits: Var, targets: Tensor },
    SigmoidBce { logits: Var, targets: Tensor },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of executed ops.
///
/// Nodes are appended in execution order, so every op's inputs precede it
/// and a single reverse sweep visits each op once. A tape is owned by one
/// thread; one forward/backward pass owns one tape.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
}

/// Result of a reverse sweep: gradients for every leaf that requires one.
#[derive(Debug, Clone)]
pub struct Gradients {
    by_var: Vec<Option<Tensor>>,
    named: BTreeMap<String, Tensor>,
}

impl Gradients {
    /// Gradient of a leaf, `None` if the leaf does not require one.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.by_var.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients of all named parameters; unreached parameters get zeros.
    pub fn named(&self) -> &BTreeMap<String, Tensor> {
        &self.named
    }

    pub fn into_named(self) -> BTreeMap<String, Tensor> {
        self.named
    }
}

fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]))
}

fn add_into(dst: &mut [f64], src: &[f64], scale: f64) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += scale * s;
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Records an input. It participates in differentiation iff
    /// `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let g = t.requires_grad();
        self.push(t, Op::Leaf, g)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.with_requires_grad(false), Op::Leaf, false)
    }

    /// A named, differentiable leaf.
    pub fn param(&mut self, name: impl Into<String>, t: Tensor) -> Var {
        let v = self.push(t.with_requires_grad(true), Op::Leaf, true);
        self.params.push((name.into(), v));
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::InvalidShape(format!("add {:?} + {:?}", x.shape(), y.shape())));
        }
        let out: Vec<f64> = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let t = Tensor::from_parts(x.shape().to_vec(), out);
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Add(a, b), g))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::InvalidShape(format!("sub {:?} - {:?}", x.shape(), y.shape())));
        }
        let out: Vec<f64> = x.data().iter().zip(y.data()).map(|(p, q)| p - q).collect();
        let t = Tensor::from_parts(x.shape().to_vec(), out);
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Sub(a, b), g))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::InvalidShape(format!("mul {:?} * {:?}", x.shape(), y.shape())));
        }
        let out: Vec<f64> = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let t = Tensor::from_parts(x.shape().to_vec(), out);
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Mul(a, b), g))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|v| v * c);
        let g = self.needs(a);
        self.push(t, Op::Scale(a, c), g)
    }

    /// `x[N,D] + b[D]` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let d = *xv.shape().last().unwrap_or(&1);
        if xv.rank() != 2 || bv.shape() != [d] {
            return Err(Error::InvalidShape(format!(
                "row bias {:?} for {:?}",
                bv.shape(),
                xv.shape()
            )));
        }
        let mut out = xv.to_vec();
        for row in out.chunks_exact_mut(d) {
            add_into(row, bv.data(), 1.0);
        }
        let t = Tensor::from_parts(xv.shape().to_vec(), out);
        let g = self.needs(x) || self.needs(b);
        Ok(self.push(t, Op::AddRowBias(x, b), g))
    }

    /// `x[C,...] + b[C]` broadcast over trailing axes.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let c = *xv.shape().first().unwrap_or(&0);
        if xv.rank() < 1 || bv.shape() != [c] {
            return Err(Error::InvalidShape(format!(
                "channel bias {:?} for {:?}",
                bv.shape(),
                xv.shape()
            )));
        }
        let per = xv.numel() / c;
        let mut out = xv.to_vec();
        for (block, &bias) in out.chunks_exact_mut(per).zip(bv.data()) {
            block.iter_mut().for_each(|v| *v += bias);
        }
        let t = Tensor::from_parts(xv.shape().to_vec(), out);
        let g = self.needs(x) || self.needs(b);
        Ok(self.push(t, Op::AddChannelBias(x, b), g))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = ops::matmul(self.value(a), self.value(b))?;
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::MatMul(a, b), g))
    }

    /// `a[m,k] · b[n,k]ᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = ops::matmul_nt(self.value(a), self.value(b))?;
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::MatMulNt(a, b), g))
    }

    /// Affine map of a vector: `w[out,in] · x[in] + b[out]`.
    pub fn linear(&mut self, w: Var, x: Var, b: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let col = self.reshape(x, vec![n, 1])?;
        let y = self.matmul(w, col)?;
        let out = self.value(y).shape()[0];
        let y = self.reshape(y, vec![out])?;
        self.add(y, b)
    }

    /// Affine map of a batch of rows: `x[N,in] · w[out,in]ᵀ + b[out]`.
    pub fn linear_rows(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul_nt(x, w)?;
        self.add_row_bias(y, b)
    }

    /// Elementwise `max(0, x)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, x: Var) -> Var {
        let t = ops::relu(self.value(x));
        let g = self.needs(x);
        self.push(t, Op::Relu(x), g)
    }

    pub fn conv1d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let t = ops::conv1d(self.value(x), self.value(w), stride)?;
        let g = self.needs(x) || self.needs(w);
        Ok(self.push(t, Op::Conv1d { x, w, stride }, g))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let t = ops::conv2d(self.value(x), self.value(w), stride)?;
        let g = self.needs(x) || self.needs(w);
        Ok(self.push(t, Op::Conv2d { x, w, stride }, g))
    }

    /// Mean over every axis but the first: `[C,...] -> [C]`.
    pub fn mean_trailing(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() < 2 {
            return Err(Error::InvalidShape(format!("mean_trailing on {:?}", xv.shape())));
        }
        let c = xv.shape()[0];
        let per = xv.numel() / c;
        let out: Vec<f64> = xv.data().chunks_exact(per).map(|b| b.iter().sum::<f64>() / per as f64).collect();
        let t = Tensor::from_parts(vec![c], out);
        let g = self.needs(x);
        Ok(self.push(t, Op::MeanTrailing(x), g))
    }

    /// Column means: `[N,D] -> [D]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let [n, d] = *xv.shape() else {
            return Err(Error::InvalidShape(format!("mean_rows on {:?}", xv.shape())));
        };
        let mut out = vec![0.0; d];
        for row in xv.data().chunks_exact(d) {
            add_into(&mut out, row, 1.0);
        }
        out.iter_mut().for_each(|v| *v /= n as f64);
        let t = Tensor::from_parts(vec![d], out);
        let g = self.needs(x);
        Ok(self.push(t, Op::MeanRows(x), g))
    }

    /// Mean over the middle axis: `[A,B,C] -> [A,C]`.
    pub fn mean_middle(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let [a, b, c] = *xv.shape() else {
            return Err(Error::InvalidShape(format!("mean_middle on {:?}", xv.shape())));
        };
        let mut out = vec![0.0; a * c];
        for (i, block) in xv.data().chunks_exact(b * c).enumerate() {
            for row in block.chunks_exact(c) {
                add_into(&mut out[i * c..(i + 1) * c], row, 1.0);
            }
        }
        out.iter_mut().for_each(|v| *v /= b as f64);
        let t = Tensor::from_parts(vec![a, c], out);
        let g = self.needs(x);
        Ok(self.push(t, Op::MeanMiddle(x), g))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).reshape(shape)?.with_requires_grad(false);
        let g = self.needs(x);
        Ok(self.push(t, Op::Reshape(x), g))
    }

    /// Stacks equally shaped values along a new leading axis.
    pub fn stack(&mut self, vars: &[Var]) -> Result<Var> {
        let first = vars
            .first()
            .ok_or_else(|| Error::InvalidShape("stack of nothing".into()))?;
        let inner = self.value(*first).shape().to_vec();
        let mut data = Vec::with_capacity(vars.len() * self.value(*first).numel());
        for &v in vars {
            let t = self.value(v);
            if t.shape() != inner.as_slice() {
                return Err(Error::InvalidShape(format!("stack {:?} with {:?}", inner, t.shape())));
            }
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![vars.len()];
        shape.extend_from_slice(&inner);
        let g = vars.iter().any(|&v| self.needs(v));
        Ok(self.push(Tensor::from_parts(shape, data), Op::Stack(vars.to_vec()), g))
    }

    /// Flattens and joins values into one vector.
    pub fn concat(&mut self, vars: &[Var]) -> Result<Var> {
        if vars.is_empty() {
            return Err(Error::InvalidShape("concat of nothing".into()));
        }
        let mut data = Vec::new();
        for &v in vars {
            data.extend_from_slice(self.value(v).data());
        }
        let n = data.len();
        let g = vars.iter().any(|&v| self.needs(v));
        Ok(self.push(Tensor::from_parts(vec![n], data), Op::Concat(vars.to_vec()), g))
    }

    /// Row `i` of a matrix, as a vector.
    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        let xv = self.value(x);
        let [n, d] = *xv.shape() else {
            return Err(Error::InvalidShape(format!("row of {:?}", xv.shape())));
        };
        if i >= n {
            return Err(Error::InvalidShape(format!("row {i} of {n}")));
        }
        let t = Tensor::from_parts(vec![d], xv.data()[i * d..(i + 1) * d].to_vec());
        let g = self.needs(x);
        Ok(self.push(t, Op::Row(x, i), g))
    }

    /// Flat element `idx` as a scalar.
    pub fn element(&mut self, x: Var, idx: usize) -> Result<Var> {
        let xv = self.value(x);
        let v = *xv
            .data()
            .get(idx)
            .ok_or_else(|| Error::InvalidShape(format!("element {idx} of {}", xv.numel())))?;
        let g = self.needs(x);
        Ok(self.push(Tensor::scalar(v), Op::Element(x, idx), g))
    }

    /// The flattened value with element `idx` removed.
    pub fn exclude(&mut self, x: Var, idx: usize) -> Result<Var> {
        let xv = self.value(x);
        if idx >= xv.numel() || xv.numel() < 2 {
            return Err(Error::InvalidShape(format!("exclude {idx} of {}", xv.numel())));
        }
        let mut data = Vec::with_capacity(xv.numel() - 1);
        data.extend_from_slice(&xv.data()[..idx]);
        data.extend_from_slice(&xv.data()[idx + 1..]);
        let n = data.len();
        let g = self.needs(x);
        Ok(self.push(Tensor::from_parts(vec![n], data), Op::Exclude(x, idx), g))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let g = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), g)
    }

    /// Sum of a list of values of equal shape.
    pub fn add_all(&mut self, vars: &[Var]) -> Result<Var> {
        let mut it = vars.iter();
        let mut acc = *it
            .next()
            .ok_or_else(|| Error::InvalidShape("add_all of nothing".into()))?;
        for &v in it {
            acc = self.add(acc, v)?;
        }
        Ok(acc)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.numel() != y.numel() {
            return Err(Error::InvalidShape(format!("dot {:?} . {:?}", x.shape(), y.shape())));
        }
        let s = kernels::dot(x.data(), y.data());
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::scalar(s), Op::Dot(a, b), g))
    }

    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (t, cache) = ops::batch_norm_train(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let g = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(t, Op::BatchNorm { x, gamma, cache, beta }, g))
    }

    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let (t, norm) = ops::l2_normalize(self.value(x))?;
        let g = self.needs(x);
        Ok(self.push(t, Op::L2Normalize { x, norm }, g))
    }

    pub fn logsumexp(&mut self, x: Var) -> Var {
        let s = ops::logsumexp(self.value(x));
        let g = self.needs(x);
        self.push(Tensor::scalar(s), Op::LogSumExp(x), g)
    }

    /// Mean over rows of `−Σ_c t_c · log softmax(logits)_c`; `targets` are
    /// row distributions (one-hot or mixed).
    pub fn soft_cross_entropy(&mut self, logits: Var, targets: Tensor) -> Result<Var> {
        let lv = self.value(logits);
        let [n, c] = *lv.shape() else {
            return Err(Error::InvalidShape(format!("cross entropy logits {:?}", lv.shape())));
        };
        if targets.shape() != [n, c] {
            return Err(Error::InvalidShape(format!(
                "cross entropy targets {:?} for logits {:?}",
                targets.shape(),
                lv.shape()
            )));
        }
        let mut total = 0.0;
        for (row, t) in lv.data().chunks_exact(c).zip(targets.data().chunks_exact(c)) {
            let lse = ops::logsumexp_slice(row);
            total += row.iter().zip(t).map(|(&l, &tc)| tc * (lse - l)).sum::<f64>();
        }
        let g = self.needs(logits);
        Ok(self.push(Tensor::scalar(total / n as f64), Op::SoftCrossEntropy { logits, targets }, g))
    }

    /// Mean over all entries of the logistic loss against targets in [0,1].
    pub fn sigmoid_bce(&mut self, logits: Var, targets: Tensor) -> Result<Var> {
        let lv = self.value(logits);
        if targets.shape() != lv.shape() {
            return Err(Error::InvalidShape(format!(
                "bce targets {:?} for logits {:?}",
                targets.shape(),
                lv.shape()
            )));
        }
        let total: f64 = lv
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&l, &t)| l.max(0.0) - l * t + math::ln(1.0 + math::exp(-l.abs())))
            .sum();
        let n = lv.numel() as f64;
        let g = self.needs(logits);
        Ok(self.push(Tensor::scalar(total / n), Op::SigmoidBce { logits, targets }, g))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::InvalidShape(format!("backward from non-scalar {:?}", lv.shape())));
        }
        self.backward_seeded(&[(loss, Tensor::scalar(1.0))])
    }

    /// Reverse sweep seeded with upstream gradients for arbitrary outputs.
    pub fn backward_seeded(&self, seeds: &[(Var, Tensor)]) -> Result<Gradients> {
        let nodes = &self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        let mut start = 0;
        for (v, seed) in seeds {
            let node = &nodes[v.0];
            if seed.numel() != node.value.numel() {
                return Err(Error::InvalidShape(format!(
                    "seed {:?} for value {:?}",
                    seed.shape(),
                    node.value.shape()
                )));
            }
            if let Some(s) = slot(&mut grads, nodes, *v) {
                add_into(s, seed.data(), 1.0);
            }
            start = start.max(v.0 + 1);
        }

        for idx in (0..start).rev() {
            let node = &nodes[idx];
            if matches!(node.op, Op::Leaf) || !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }

        let by_var: Vec<Option<Tensor>> = nodes
            .iter()
            .zip(grads)
            .map(|(n, g)| match (&n.op, n.needs_grad) {
                (Op::Leaf, true) => Some(Tensor::from_parts(
                    n.value.shape().to_vec(),
                    g.unwrap_or_else(|| vec![0.0; n.value.numel()]),
                )),
                _ => None,
            })
            .collect();
        let named = self
            .params
            .iter()
            .filter_map(|(name, v)| by_var[v.0].clone().map(|t| (name.clone(), t)))
            .collect();
        Ok(Gradients { by_var, named })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if let Some(s) = slot(grads, nodes, *a) {
                    add_into(s, g, 1.0);
                }
                if let Some(s) = slot(grads, nodes, *b) {
                    add_into(s, g, 1.0);
                }
            }
            Op::Sub(a, b) => {
                if let Some(s) = slot(grads, nodes, *a) {
                    add_into(s, g, 1.0);
                }
                if let Some(s) = slot(grads, nodes, *b) {
                    add_into(s, g, -1.0);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                if let Some(s) = slot(grads, nodes, *a) {
                    for ((d, &gi), &bi) in s.iter_mut().zip(g).zip(bv) {
                        *d += gi * bi;
                    }
                }
                if let Some(s) = slot(grads, nodes, *b) {
                    for ((d, &gi), &ai) in s.iter_mut().zip(g).zip(av) {
                        *d += gi * ai;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(s) = slot(grads, nodes, *a) {
                    add_into(s, g, *c);
                }
            }
            Op::AddRowBias(x, b) => {
                if let Some(s) = slot(grads, nodes, *x) {
                    add_into(s, g, 1.0);
                }
                let d = val(*b).numel();
                if let Some(s) = slot(grads, nodes, *b) {
                    for row in g.chunks_exact(d) {
                        add_into(s, row, 1.0);
                    }
                }
            }
            Op::AddChannelBias(x, b) => {
                if let Some(s) = slot(grads, nodes, *x) {
                    add_into(s, g, 1.0);
                }
                let c = val(*b).numel();
                let per = g.len() / c;
                if let Some(s) = slot(grads, nodes, *b) {
                    for (d, block) in s.iter_mut().zip(g.chunks_exact(per)) {
                        *d += block.iter().sum::<f64>();
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if let Some(s) = slot(grads, nodes, *a) {
                    kernels::gemm_nt(m, n, k, g, bv.data(), s);
                }
                if let Some(s) = slot(grads, nodes, *b) {
                    kernels::gemm_tn(k, m, n, av.data(), g, s);
                }
            }
            Op::MatMulNt(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[0]);
                if let Some(s) = slot(grads, nodes, *a) {
                    kernels::gemm_nn(m, n, k, g, bv.data(), s);
                }
                if let Some(s) = slot(grads, nodes, *b) {
                    kernels::gemm_tn(n, m, k, g, av.data(), s);
                }
            }
            Op::Relu(x) => {
                let xv = val(*x).data();
                if let Some(s) = slot(grads, nodes, *x) {
                    for ((d, &gi), &xi) in s.iter_mut().zip(g).zip(xv) {
                        if xi > 0.0 {
                            *d += gi;
                        }
                    }
                }
            }
            Op::Conv1d { x, w, stride } => {
                let (xv, wv) = (val(*x), val(*w));
                let (c_in, len) = (xv.shape()[0], xv.shape()[1]);
                let (c_out, k) = (wv.shape()[0], wv.shape()[2]);
                let out_len = conv_out_len(len, k, *stride);
                let rows = c_in * k;
                let mut cols = vec![0.0; rows * out_len];
                kernels::im2col_1d(xv.data(), c_in, len, k, *stride, &mut cols);
                if let Some(s) = slot(grads, nodes, *w) {
                    kernels::gemm_nt(c_out, out_len, rows, g, &cols, s);
                }
                if nodes[x.0].needs_grad {
                    cols.iter_mut().for_each(|v| *v = 0.0);
                    kernels::gemm_tn(rows, c_out, out_len, wv.data(), g, &mut cols);
                    if let Some(s) = slot(grads, nodes, *x) {
                        kernels::col2im_1d(&cols, c_in, len, k, *stride, s);
                    }
                }
            }
            Op::Conv2d { x, w, stride } => {
                let (xv, wv) = (val(*x), val(*w));
                let (c_in, h, wd) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let (c_out, kh, kw) = (wv.shape()[0], wv.shape()[2], wv.shape()[3]);
                let plane = conv_out_len(h, kh, *stride) * conv_out_len(wd, kw, *stride);
                let rows = c_in * kh * kw;
                let mut cols = vec![0.0; rows * plane];
                kernels::im2col_2d(xv.data(), c_in, h, wd, kh, kw, *stride, &mut cols);
                if let Some(s) = slot(grads, nodes, *w) {
                    kernels::gemm_nt(c_out, plane, rows, g, &cols, s);
                }
                if nodes[x.0].needs_grad {
                    cols.iter_mut().for_each(|v| *v = 0.0);
                    kernels::gemm_tn(rows, c_out, plane, wv.data(), g, &mut cols);
                    if let Some(s) = slot(grads, nodes, *x) {
                        kernels::col2im_2d(&cols, c_in, h, wd, kh, kw, *stride, s);
                    }
                }
            }
            Op::MeanTrailing(x) => {
                let per = val(*x).numel() / g.len();
                if let Some(s) = slot(grads, nodes, *x) {
                    for (block, &gi) in s.chunks_exact_mut(per).zip(g) {
                        let share = gi / per as f64;
                        block.iter_mut().for_each(|v| *v += share);
                    }
                }
            }
            Op::MeanRows(x) => {
                let n = val(*x).shape()[0] as f64;
                if let Some(s) = slot(grads, nodes, *x) {
                    for row in s.chunks_exact_mut(g.len()) {
                        add_into(row, g, 1.0 / n);
                    }
                }
            }
            Op::MeanMiddle(x) => {
                let shape = val(*x).shape();
                let (b, c) = (shape[1], shape[2]);
                if let Some(s) = slot(grads, nodes, *x) {
                    for (block, gi) in s.chunks_exact_mut(b * c).zip(g.chunks_exact(c)) {
                        for row in block.chunks_exact_mut(c) {
                            add_into(row, gi, 1.0 / b as f64);
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(s) = slot(grads, nodes, *x) {
                    add_into(s, g, 1.0);
                }
            }
            Op::Stack(vars) | Op::Concat(vars) => {
                let mut off = 0;
                for &v in vars {
                    let n = val(v).numel();
                    if let Some(s) = slot(grads, nodes, v) {
                        add_into(s, &g[off..off + n], 1.0);
                    }
                    off += n;
                }
            }
            Op::Row(x, i) => {
                let d = g.len();
                if let Some(s) = slot(grads, nodes, *x) {
                    add_into(&mut s[i * d..(i + 1) * d], g, 1.0);
                }
            }
            Op::Element(x, idx) => {
                if let Some(s) = slot(grads, nodes, *x) {
                    s[*idx] += g[0];
                }
            }
            Op::Exclude(x, idx) => {
                if let Some(s) = slot(grads, nodes, *x) {
                    add_into(&mut s[..*idx], &g[..*idx], 1.0);
                    add_into(&mut s[idx + 1..], &g[*idx..], 1.0);
                }
            }
            Op::Sum(x) => {
                if let Some(s) = slot(grads, nodes, *x) {
                    s.iter_mut().for_each(|v| *v += g[0]);
                }
            }
            Op::Dot(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                if let Some(s) = slot(grads, nodes, *a) {
                    add_into(s, bv, g[0]);
                }
                if let Some(s) = slot(grads, nodes, *b) {
                    add_into(s, av, g[0]);
                }
            }
            Op::BatchNorm { x, gamma, cache, beta } => {
                let d = val(*gamma).numel();
                let n = g.len() / d;
                let gam = val(*gamma).data();
                let mut sum_g = vec![0.0; d];
                let mut sum_gx = vec![0.0; d];
                for (row, xh) in g.chunks_exact(d).zip(cache.xhat.chunks_exact(d)) {
                    for j in 0..d {
                        sum_g[j] += row[j];
                        sum_gx[j] += row[j] * xh[j];
                    }
                }
                if let Some(s) = slot(grads, nodes, *beta) {
                    add_into(s, &sum_g, 1.0);
                }
                if let Some(s) = slot(grads, nodes, *gamma) {
                    add_into(s, &sum_gx, 1.0);
                }
                if let Some(s) = slot(grads, nodes, *x) {
                    let nf = n as f64;
                    for r in 0..n {
                        for j in 0..d {
                            let k = r * d + j;
                            s[k] += gam[j] * cache.inv_std[j] / nf
                                * (nf * g[k] - sum_g[j] - cache.xhat[k] * sum_gx[j]);
                        }
                    }
                }
            }
            Op::L2Normalize { x, norm } => {
                let y = node.value.data();
                let yg = kernels::dot(y, g);
                if let Some(s) = slot(grads, nodes, *x) {
                    for ((d, &gi), &yi) in s.iter_mut().zip(g).zip(y) {
                        *d += (gi - yi * yg) / norm;
                    }
                }
            }
            Op::LogSumExp(x) => {
                let p = ops::softmax_slice(val(*x).data());
                if let Some(s) = slot(grads, nodes, *x) {
                    add_into(s, &p, g[0]);
                }
            }
            Op::SoftCrossEntropy { logits, targets } => {
                let lv = val(*logits);
                let c = lv.shape()[1];
                let n = lv.shape()[0] as f64;
                if let Some(s) = slot(grads, nodes, *logits) {
                    for ((srow, row), t) in s
                        .chunks_exact_mut(c)
                        .zip(lv.data().chunks_exact(c))
                        .zip(targets.data().chunks_exact(c))
                    {
                        let p = ops::softmax_slice(row);
                        let mass: f64 = t.iter().sum();
                        for j in 0..c {
                            srow[j] += g[0] * (p[j] * mass - t[j]) / n;
                        }
                    }
                }
            }
            Op::SigmoidBce { logits, targets } => {
                let lv = val(*logits);
                let n = lv.numel() as f64;
                if let Some(s) = slot(grads, nodes, *logits) {
                    for ((d, &l), &t) in s.iter_mut().zip(lv.data()).zip(targets.data()) {
                        let sig = 1.0 / (1.0 + math::exp(-l));
                        *d += g[0] * (sig - t) / n;
                    }
                }
            }
        }
    }
}
