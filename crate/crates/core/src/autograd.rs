//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] is built fresh for every forward pass. Each op appends one
//! node holding its output value and whatever it needs for the backward
//! sweep; [`Tape::backward`] walks the nodes once in reverse order.

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, stride: usize, padding: usize },
    ChannelBias { x: Var, b: Var },
    Linear { x: Var, w: Var, b: Var },
    Relu(Var),
    Tanh(Var),
    Upsample2(Var),
    MaxPool2 { x: Var, argmax: Vec<usize> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ScalarMul(Var, f64),
    Clamp { x: Var, lo: f64, hi: f64 },
    ResidualClip { x: Var, delta: Var, lo: f64, hi: f64 },
    Reshape(Var),
    Gather { x: Var, index: Vec<usize> },
    Softmax(Var),
    CrossEntropy { logits: Var, targets: Vec<usize> },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; all zeros when the loss
    /// does not depend on `v`.
    pub fn get(&self, v: Var) -> Tensor {
        self.grads[v.0].clone().unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub fn reached(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, inputs: &[Var], op: Op) -> Var {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node { value, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, requires_grad: true, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, requires_grad: false, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    /// Copies the current value of `v` into a fresh constant leaf.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let y = ops::conv2d(self.value(x), self.value(w), stride, padding)?;
        Ok(self.push(y, &[x, w], Op::Conv2d { x, w, stride, padding }))
    }

    pub fn channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let y = ops::channel_bias(self.value(x), self.value(b))?;
        Ok(self.push(y, &[x, b], Op::ChannelBias { x, b }))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = ops::linear(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(y, &[x, w, b], Op::Linear { x, w, b }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = ops::relu(self.value(x));
        self.push(y, &[x], Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let y = self.value(x).map(f64::tanh);
        self.push(y, &[x], Op::Tanh(x))
    }

    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let y = ops::upsample2(self.value(x))?;
        Ok(self.push(y, &[x], Op::Upsample2(x)))
    }

    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (y, argmax) = ops::max_pool2(self.value(x))?;
        Ok(self.push(y, &[x], Op::MaxPool2 { x, argmax }))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!(
                "{what} operands {:?} and {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).unwrap()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let y = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(y, &[a, b], Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let y = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(y, &[a, b], Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let y = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(y, &[a, b], Op::Mul(a, b)))
    }

    pub fn scalar_mul(&mut self, x: Var, s: f64) -> Var {
        let y = self.value(x).map(|v| v * s);
        self.push(y, &[x], Op::ScalarMul(x, s))
    }

    /// Elementwise clamp to `[lo, hi]`. The gradient passes only where the
    /// input lies strictly inside the interval.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let y = self.value(x).map(|v| v.clamp(lo, hi));
        self.push(y, &[x], Op::Clamp { x, lo, hi })
    }

    /// `clamp(x + delta, lo, hi)`, with the result pulled back by at most an
    /// ulp so that the computed `|y - x|` never exceeds `max|delta|` through
    /// rounding. Gradients match the unfused add-then-clamp.
    pub fn residual_clip(&mut self, x: Var, delta: Var, lo: f64, hi: f64) -> Result<Var> {
        let (xv, dv) = (self.value(x), self.value(delta));
        if xv.shape() != dv.shape() {
            return Err(Error::Shape(format!(
                "residual_clip shapes {:?} and {:?}",
                xv.shape(),
                dv.shape()
            )));
        }
        let data = xv
            .data()
            .iter()
            .zip(dv.data())
            .map(|(&a, &d)| {
                let mut y = a + d;
                while (y - a).abs() > d.abs() {
                    y = if y > a { y.next_down() } else { y.next_up() };
                }
                y.clamp(lo, hi)
            })
            .collect();
        let y = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(y, &[x, delta], Op::ResidualClip { x, delta, lo, hi }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).reshape(shape)?;
        Ok(self.push(y, &[x], Op::Reshape(x)))
    }

    /// Flattens everything but the leading axis.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape();
        let (b, rest) = (s[0], s[1..].iter().product::<usize>());
        self.reshape(x, &[b, rest])
    }

    /// Builds a `shape` tensor whose i-th element is `x.data()[index[i]]`.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let src = self.value(x).data();
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(Error::Shape(format!(
                "gather index {bad} out of range for {:?}",
                self.value(x).shape()
            )));
        }
        let y = Tensor::new(shape.to_vec(), index.iter().map(|&i| src[i]).collect())?;
        Ok(self.push(y, &[x], Op::Gather { x, index }))
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let y = ops::softmax(self.value(x));
        self.push(y, &[x], Op::Softmax(x))
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let rows = ops::cross_entropy_rows(self.value(logits), targets)?;
        let mean = rows.iter().sum::<f64>() / rows.len() as f64;
        Ok(self.push(
            Tensor::scalar(mean),
            &[logits],
            Op::CrossEntropy { logits, targets: targets.to_vec() },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).sum());
        self.push(y, &[x], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let y = Tensor::scalar(t.sum() / t.numel() as f64);
        self.push(y, &[x], Op::Mean(x))
    }

    /// Sums scalars; errors on an empty list.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let (&first, rest) = terms
            .split_first()
            .ok_or_else(|| Error::InvalidArgument("sum of zero terms".into()))?;
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shapes: Vec<Vec<usize>> = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let root = &self.nodes[loss.0];
        if !root.value.is_scalar() {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        if !root.requires_grad {
            return Ok(Gradients { grads, shapes });
        }
        grads[loss.0] = Some(Tensor::full(root.value.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        // only leaves and interior values that need it keep a gradient
        for (g, n) in grads.iter_mut().zip(&self.nodes) {
            if !n.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, delta: Tensor| accumulate(grads, v, delta);
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, stride, padding } => {
                let (dx, dw) = ops::conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    g,
                    *stride,
                    *padding,
                    needs(*x),
                    needs(*w),
                )?;
                if let Some(dx) = dx {
                    acc(*x, dx);
                }
                if let Some(dw) = dw {
                    acc(*w, dw);
                }
            }
            Op::ChannelBias { x, b } => {
                if needs(*b) {
                    acc(*b, ops::channel_bias_grad(g, self.value(*b).numel()));
                }
                if needs(*x) {
                    acc(*x, g.clone());
                }
            }
            Op::Linear { x, w, b } => {
                let (dx, dw, db) = ops::linear_backward(self.value(*x), self.value(*w), g);
                if needs(*x) {
                    acc(*x, dx);
                }
                if needs(*w) {
                    acc(*w, dw);
                }
                if needs(*b) {
                    acc(*b, db);
                }
            }
            Op::Relu(x) => {
                let d = zip(g, self.value(*x), |g, v| if v > 0.0 { g } else { 0.0 });
                acc(*x, d);
            }
            Op::Tanh(x) => {
                let d = zip(g, &node.value, |g, y| g * (1.0 - y * y));
                acc(*x, d);
            }
            Op::Upsample2(x) => acc(*x, ops::upsample2_backward(g, self.value(*x).shape())),
            Op::MaxPool2 { x, argmax } => {
                let mut d = Tensor::zeros(self.value(*x).shape());
                let dd = d.data_mut();
                for (&i, &gv) in argmax.iter().zip(g.data()) {
                    dd[i] += gv;
                }
                acc(*x, d);
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    acc(*a, g.clone());
                }
                if needs(*b) {
                    acc(*b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    acc(*a, g.clone());
                }
                if needs(*b) {
                    acc(*b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    acc(*a, zip(g, self.value(*b), |g, v| g * v));
                }
                if needs(*b) {
                    acc(*b, zip(g, self.value(*a), |g, v| g * v));
                }
            }
            Op::ScalarMul(x, s) => acc(*x, g.map(|v| v * s)),
            Op::Clamp { x, lo, hi } => {
                let d = zip(g, self.value(*x), |g, v| if v > *lo && v < *hi { g } else { 0.0 });
                acc(*x, d);
            }
            Op::ResidualClip { x, delta, lo, hi } => {
                let sum = zip(self.value(*x), self.value(*delta), |a, d| a + d);
                let d = zip(g, &sum, |g, v| if v > *lo && v < *hi { g } else { 0.0 });
                acc(*x, d.clone());
                acc(*delta, d);
            }
            Op::Reshape(x) => acc(*x, g.reshape(self.value(*x).shape())?),
            Op::Gather { x, index } => {
                let mut d = Tensor::zeros(self.value(*x).shape());
                let dd = d.data_mut();
                for (&i, &gv) in index.iter().zip(g.data()) {
                    dd[i] += gv;
                }
                acc(*x, d);
            }
            Op::Softmax(x) => {
                let k = *node.value.shape().last().unwrap();
                let mut d = g.clone();
                for (drow, yrow) in d.data_mut().chunks_mut(k).zip(node.value.data().chunks(k)) {
                    let dot: f64 = drow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    drow.iter_mut().zip(yrow).for_each(|(dv, &y)| *dv = y * (*dv - dot));
                }
                acc(*x, d);
            }
            Op::CrossEntropy { logits, targets } => {
                let scale = g.item() / targets.len() as f64;
                let mut d = ops::softmax(self.value(*logits));
                let k = d.shape()[1];
                for (row, &t) in d.data_mut().chunks_mut(k).zip(targets) {
                    row[t] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                acc(*logits, d);
            }
            Op::Sum(x) => acc(*x, Tensor::full(self.value(*x).shape(), g.item())),
            Op::Mean(x) => {
                let n = self.value(*x).numel() as f64;
                acc(*x, Tensor::full(self.value(*x).shape(), g.item() / n));
            }
        }
        Ok(())
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).unwrap()
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing
            .data_mut()
            .iter_mut()
            .zip(delta.data())
            .for_each(|(e, d)| *e += d),
        slot @ None => *slot = Some(delta),
    }
}
