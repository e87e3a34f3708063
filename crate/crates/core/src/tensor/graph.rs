use std::collections::BTreeMap;

use super::{ops, Float, Tensor};
use crate::dcor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d { input: Var, filters: Var, groups: usize, padding: usize },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBias(Var, Var),
    MatMul(Var, Var),
    Relu(Var),
    AvgPool2(Var),
    GlobalMeanPool(Var),
    SoftmaxRows(Var),
    Log(Var),
    Sum(Var),
    ConcatChannels(Vec<Var>),
    /// `sum_i weights[row, i] * items[i]`.
    Combine { weights: Var, row: usize, items: Vec<Var> },
    CrossEntropy { logits: Var, labels: Vec<usize> },
    DistCorr { x: Var, y: Var },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
    is_param: bool,
}

/// Records operations in execution order; every node's inputs precede it,
/// so a single reverse sweep visits each node once.
#[derive(Debug, Default)]
pub struct Graph<T: Float = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar with respect to every parameter registered in the
/// graph. Parameters the loss does not depend on map to zeros.
#[derive(Debug, Clone)]
pub struct Gradients<T = f32> {
    grads: BTreeMap<Var, Tensor<T>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(&v)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor<T>)> {
        self.grads.iter().map(|(v, t)| (*v, t))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.remove(&v)
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool, is_param: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            is_param,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A trainable leaf; it appears in the gradient map.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false, false)
    }

    pub fn conv2d(&mut self, input: Var, filters: Var, groups: usize, padding: usize) -> Result<Var> {
        let out = ops::conv2d(self.value(input), self.value(filters), groups, padding)?;
        let ng = self.ng(&[input, filters]);
        Ok(self.push(out, Op::Conv2d { input, filters, groups, padding }, ng, false))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::add(self.value(a), self.value(b))?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), ng, false))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::mul(self.value(a), self.value(b))?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), ng, false))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = ops::scale(self.value(a), c);
        let ng = self.ng(&[a]);
        self.push(out, Op::Scale(a, c), ng, false)
    }

    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let out = ops::add_bias(self.value(a), self.value(bias))?;
        let ng = self.ng(&[a, bias]);
        Ok(self.push(out, Op::AddBias(a, bias), ng, false))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), ng, false))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = ops::relu(self.value(a));
        let ng = self.ng(&[a]);
        self.push(out, Op::Relu(a), ng, false)
    }

    pub fn avg_pool2(&mut self, a: Var) -> Result<Var> {
        let out = ops::avg_pool2(self.value(a))?;
        let ng = self.ng(&[a]);
        Ok(self.push(out, Op::AvgPool2(a), ng, false))
    }

    pub fn global_mean_pool(&mut self, a: Var) -> Result<Var> {
        let out = ops::global_mean_pool(self.value(a))?;
        let ng = self.ng(&[a]);
        Ok(self.push(out, Op::GlobalMeanPool(a), ng, false))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let out = ops::softmax_rows(self.value(a))?;
        let ng = self.ng(&[a]);
        Ok(self.push(out, Op::SoftmaxRows(a), ng, false))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.ln());
        let ng = self.ng(&[a]);
        self.push(out, Op::Log(a), ng, false)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().map(|v| v.as_f64()).sum();
        let ng = self.ng(&[a]);
        self.push(Tensor::scalar(T::of(s)), Op::Sum(a), ng, false)
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = ops::concat_channels(&values)?;
        let ng = self.ng(parts);
        Ok(self.push(out, Op::ConcatChannels(parts.to_vec()), ng, false))
    }

    /// Convex (or any weighted) combination of same-shaped tensors using row
    /// `row` of a rank-2 weight matrix.
    pub fn combine(&mut self, weights: Var, row: usize, items: &[Var]) -> Result<Var> {
        let w = self.value(weights);
        if w.rank() != 2 || row >= w.shape()[0] {
            return Err(Error::invalid(format!(
                "weight row {row} not available in shape {:?}",
                w.shape()
            )));
        }
        if w.shape()[1] != items.len() {
            return Err(Error::dim("combine weight columns", items.len(), w.shape()[1]));
        }
        let first = *items.first().ok_or_else(|| Error::invalid("combine of nothing"))?;
        let shape = self.value(first).shape().to_vec();
        let mut out = Tensor::zeros(&shape);
        for (i, &item) in items.iter().enumerate() {
            let v = self.value(item);
            v.expect_shape("combined item", &shape)?;
            let c = self.value(weights).row(row)[i];
            for (d, &x) in out.data_mut().iter_mut().zip(v.data()) {
                *d += c * x;
            }
        }
        let mut deps = items.to_vec();
        deps.push(weights);
        let ng = self.ng(&deps);
        Ok(self.push(
            out,
            Op::Combine {
                weights,
                row,
                items: items.to_vec(),
            },
            ng,
            false,
        ))
    }

    /// Mean softmax cross-entropy over the batch (scalar).
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, _) = ops::softmax_cross_entropy(self.value(logits), labels)?;
        let ng = self.ng(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            ng,
            false,
        ))
    }

    /// Distance correlation of two `[n, d]` batches (scalar). Also returns
    /// the degenerate flag.
    pub fn dcor(&mut self, x: Var, y: Var) -> Result<(Var, bool)> {
        let v = dcor::dcor(self.value(x), self.value(y))?;
        let ng = self.ng(&[x, y]);
        let var = self.push(Tensor::scalar(T::of(v.value)), Op::DistCorr { x, y }, ng, false);
        Ok((var, v.degenerate))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if !self.value(loss).is_scalar() {
            return Err(Error::dim("loss elements", 1, self.value(loss).len()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(self.value(loss).shape().to_vec(), vec![T::one()])?);
        let mut out = BTreeMap::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.is_param {
                out.insert(Var(i), g);
                continue;
            }
            if node.needs_grad {
                self.propagate(node, &g, &mut grads)?;
            }
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.is_param {
                out.entry(Var(i)).or_insert_with(|| Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads: out })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let mut acc = |v: Var, delta: Tensor<T>| -> Result<()> {
            match &mut grads[v.0] {
                Some(existing) => {
                    for (d, &x) in existing.data_mut().iter_mut().zip(delta.data()) {
                        *d += x;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
            Ok(())
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, filters, groups, padding } => {
                let (gx, gw) = ops::conv2d_backward(
                    self.value(*input),
                    self.value(*filters),
                    *groups,
                    *padding,
                    g,
                    self.wants(*input),
                    self.wants(*filters),
                )?;
                if let Some(gx) = gx {
                    acc(*input, gx)?;
                }
                if let Some(gw) = gw {
                    acc(*filters, gw)?;
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    acc(*a, g.clone())?;
                }
                if self.wants(*b) {
                    acc(*b, g.clone())?;
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    acc(*a, ops::mul(g, self.value(*b))?)?;
                }
                if self.wants(*b) {
                    acc(*b, ops::mul(g, self.value(*a))?)?;
                }
            }
            Op::Scale(a, c) => {
                if self.wants(*a) {
                    acc(*a, ops::scale(g, *c))?;
                }
            }
            Op::AddBias(a, b) => {
                if self.wants(*a) {
                    acc(*a, g.clone())?;
                }
                if self.wants(*b) {
                    let n = self.value(*b).len();
                    let mut gb = vec![T::zero(); n];
                    for row in g.data().chunks(n) {
                        for (d, &x) in gb.iter_mut().zip(row) {
                            *d += x;
                        }
                    }
                    acc(*b, Tensor::new(self.value(*b).shape().to_vec(), gb)?)?;
                }
            }
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    acc(*a, ops::matmul_nt(g, self.value(*b))?)?;
                }
                if self.wants(*b) {
                    acc(*b, ops::matmul_tn(self.value(*a), g)?)?;
                }
            }
            Op::Relu(a) => {
                if self.wants(*a) {
                    let x = self.value(*a);
                    let data = g
                        .data()
                        .iter()
                        .zip(x.data())
                        .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                        .collect();
                    acc(*a, Tensor::new(x.shape().to_vec(), data)?)?;
                }
            }
            Op::AvgPool2(a) => {
                if self.wants(*a) {
                    acc(*a, ops::avg_pool2_backward(self.value(*a).shape(), g))?;
                }
            }
            Op::GlobalMeanPool(a) => {
                if self.wants(*a) {
                    let shape = self.value(*a).shape().to_vec();
                    let (hw, c) = (shape[1] * shape[2], shape[3]);
                    let inv = T::of(1.0 / hw as f64);
                    let mut data = Vec::with_capacity(shape.iter().product());
                    for row in g.data().chunks(c) {
                        for _ in 0..hw {
                            data.extend(row.iter().map(|&v| v * inv));
                        }
                    }
                    acc(*a, Tensor::new(shape, data)?)?;
                }
            }
            Op::SoftmaxRows(a) => {
                if self.wants(*a) {
                    let y = &node.value;
                    let c = y.shape()[1];
                    let mut data = Vec::with_capacity(y.len());
                    for (yr, gr) in y.data().chunks(c).zip(g.data().chunks(c)) {
                        let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                        data.extend(yr.iter().zip(gr).map(|(&p, &q)| p * (q - dot)));
                    }
                    acc(*a, Tensor::new(y.shape().to_vec(), data)?)?;
                }
            }
            Op::Log(a) => {
                if self.wants(*a) {
                    let x = self.value(*a);
                    let data = g.data().iter().zip(x.data()).map(|(&gv, &xv)| gv / xv).collect();
                    acc(*a, Tensor::new(x.shape().to_vec(), data)?)?;
                }
            }
            Op::Sum(a) => {
                if self.wants(*a) {
                    acc(*a, Tensor::full(self.value(*a).shape(), g.data()[0]))?;
                }
            }
            Op::ConcatChannels(parts) => {
                let widths: Vec<usize> = parts
                    .iter()
                    .map(|p| *self.value(*p).shape().last().unwrap())
                    .collect();
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (p, &w) in parts.iter().zip(&widths) {
                    if self.wants(*p) {
                        let data = g
                            .data()
                            .chunks(total)
                            .flat_map(|row| row[offset..offset + w].iter().copied())
                            .collect();
                        acc(*p, Tensor::new(self.value(*p).shape().to_vec(), data)?)?;
                    }
                    offset += w;
                }
            }
            Op::Combine { weights, row, items } => {
                let w = self.value(*weights);
                let cols = w.shape()[1];
                let coeffs = w.row(*row).to_vec();
                for (&item, &c) in items.iter().zip(&coeffs) {
                    if self.wants(item) {
                        acc(item, ops::scale(g, c))?;
                    }
                }
                if self.wants(*weights) {
                    let mut gw = Tensor::zeros(w.shape());
                    for (i, &item) in items.iter().enumerate() {
                        let dot: f64 = self
                            .value(item)
                            .data()
                            .iter()
                            .zip(g.data())
                            .map(|(&x, &y)| x.as_f64() * y.as_f64())
                            .sum();
                        gw.data_mut()[row * cols + i] = T::of(dot);
                    }
                    acc(*weights, gw)?;
                }
            }
            Op::CrossEntropy { logits, labels } => {
                if self.wants(*logits) {
                    let (_, mut probs) = ops::softmax_cross_entropy(self.value(*logits), labels)?;
                    let c = probs.shape()[1];
                    let scale = g.data()[0] / T::of(labels.len() as f64);
                    for (i, &y) in labels.iter().enumerate() {
                        probs.data_mut()[i * c + y] -= T::one();
                    }
                    for v in probs.data_mut() {
                        *v *= scale;
                    }
                    acc(*logits, probs)?;
                }
            }
            Op::DistCorr { x, y } => {
                let (_, gx, gy) = dcor::dcor_with_grad(self.value(*x), self.value(*y))?;
                let s = g.data()[0];
                if self.wants(*x) {
                    acc(*x, ops::scale(&gx, s))?;
                }
                if self.wants(*y) {
                    acc(*y, ops::scale(&gy, s))?;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_fn(&[2, 3], |i| i as f64 - 2.5));
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn square_sum_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn unused_parameter_gets_zeros() {
        let mut g = Graph::<f32>::new();
        let x = g.param(Tensor::ones(&[3]));
        let unused = g.param(Tensor::ones(&[2, 2]));
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(unused).unwrap(), &Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn constants_are_not_in_the_gradient_map() {
        let mut g = Graph::<f32>::new();
        let c = g.constant(Tensor::ones(&[3]));
        let x = g.param(Tensor::ones(&[3]));
        let y = g.mul(c, x).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.len(), 1);
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::<f32>::new();
        let x = g.param(Tensor::ones(&[3]));
        assert!(g.backward(x).is_err());
    }
}
