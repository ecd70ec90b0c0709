//! Reverse-mode differentiation over a linear recording of primitive ops.
//!
//! A [`Tape`] borrows the [`ParamStore`] it reads weights from, so recording
//! never copies parameters. [`Tape::backward`] returns [`Gradients`] which
//! the caller folds into the store once the tape is dropped.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::numerics::kernels;
use crate::numerics::param::{Gradients, ParamId, ParamStore};
use crate::numerics::tensor::{Real, Tensor};

/// Handle to a recorded value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

#[derive(Debug)]
enum Op<T> {
    Input,
    Param(ParamId),
    Dense {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv2d {
        x: Var,
        k: Var,
        b: Var,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Upsample {
        x: Var,
    },
    Act {
        x: Var,
        kind: Activation,
    },
    Softmax {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor<T>,
    },
    Mse {
        a: Var,
        b: Var,
    },
    Sum {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: T,
    },
}

#[derive(Debug)]
struct Node<'p, T: Real> {
    value: Cow<'p, Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Debug)]
pub struct Tape<'p, T: Real = f32> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<'p, T>>,
    consumed: bool,
}

impl<'p, T: Real> Tape<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'p, Tensor<T>>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A constant input; never receives a gradient.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(Cow::Owned(value), Op::Input, false)
    }

    /// A parameter read from the store. Frozen parameters act as constants.
    pub fn param(&mut self, id: ParamId) -> Var {
        let p = self.params.get(id);
        self.push(Cow::Borrowed(p.value()), Op::Param(id), p.trainable())
    }

    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = kernels::dense(self.value(x), self.value(w), self.value(b))?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Cow::Owned(out), Op::Dense { x, w, b }, rg))
    }

    pub fn conv2d(&mut self, x: Var, k: Var, b: Var) -> Result<Var> {
        let out = kernels::conv2d(self.value(x), self.value(k), self.value(b))?;
        let rg = self.rg(x) || self.rg(k) || self.rg(b);
        Ok(self.push(Cow::Owned(out), Op::Conv2d { x, k, b }, rg))
    }

    pub fn maxpool2d(&mut self, x: Var) -> Result<Var> {
        let (out, argmax) = kernels::maxpool2d(self.value(x))?;
        let rg = self.rg(x);
        Ok(self.push(Cow::Owned(out), Op::MaxPool { x, argmax }, rg))
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let out = kernels::upsample2x(self.value(x))?;
        let rg = self.rg(x);
        Ok(self.push(Cow::Owned(out), Op::Upsample { x }, rg))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let out = match kind {
            Activation::Relu => self.value(x).map(|v| v.max(T::zero())),
            Activation::Sigmoid => self.value(x).map(kernels::sigmoid),
        };
        let rg = self.rg(x);
        self.push(Cow::Owned(out), Op::Act { x, kind }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let out = kernels::softmax(self.value(x))?;
        let rg = self.rg(x);
        Ok(self.push(Cow::Owned(out), Op::Softmax { x }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(Cow::Owned(out), Op::Reshape { x }, rg))
    }

    /// Collapses all axes after the first.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let shape = self.value(x).shape();
        let n = shape[0];
        let rest = shape[1..].iter().product();
        self.reshape(x, &[n, rest])
    }

    /// Concatenates two `[n, *]` matrices along the feature axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.dim(0) != tb.dim(0) {
            return Err(Error::dim("concat", ta.shape(), tb.shape()));
        }
        let (n, wa, wb) = (ta.dim(0), ta.dim(1), tb.dim(1));
        let mut data = Vec::with_capacity(n * (wa + wb));
        for i in 0..n {
            data.extend_from_slice(&ta.data()[i * wa..(i + 1) * wa]);
            data.extend_from_slice(&tb.data()[i * wb..(i + 1) * wb]);
        }
        let out = Tensor::new(vec![n, wa + wb], data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Cow::Owned(out), Op::Concat { a, b }, rg))
    }

    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = kernels::cross_entropy(self.value(logits), labels)?;
        let rg = self.rg(logits);
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.push(Cow::Owned(Tensor::scalar(loss)), op, rg))
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let loss = kernels::mse(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Cow::Owned(Tensor::scalar(loss)), Op::Mse { a, b }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Cow::Owned(Tensor::scalar(s)), Op::Sum { x }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim("add", ta.shape(), tb.shape()));
        }
        let mut out = ta.clone();
        out.add_assign(tb);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Cow::Owned(out), Op::Add { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let out = self.value(x).map(|v| v * factor);
        let rg = self.rg(x);
        self.push(Cow::Owned(out), Op::Scale { x, factor }, rg)
    }

    /// Back-propagates from a scalar `loss`. A tape can be replayed once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::StaleTape);
        }
        self.consumed = true;
        if self.value(loss).len() != 1 {
            return Err(Error::dim(
                "backward needs a scalar",
                self.value(loss).shape(),
                &[1],
            ));
        }
        let mut grads = Gradients::new(self.params.len());
        let mut adj: Vec<Option<Tensor<T>>> = Vec::new();
        adj.resize_with(loss.0 + 1, || None);
        adj[loss.0] = Some(Tensor::full(self.value(loss).shape().to_vec(), T::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            let mut send = |v: Var, d: Tensor<T>| match &mut adj[v.0] {
                Some(acc) => acc.add_assign(&d),
                slot @ None => *slot = Some(d),
            };
            let val = |v: Var| -> &Tensor<T> { &self.nodes[v.0].value };
            let rg = |v: Var| self.nodes[v.0].requires_grad;
            match &node.op {
                Op::Input => {}
                Op::Param(id) => grads.accumulate(*id, g),
                Op::Dense { x, w, b } => {
                    let (dx, dw, db) = kernels::dense_backward(val(*x), val(*w), &g, rg(*x));
                    if let Some(dx) = dx {
                        send(*x, dx);
                    }
                    if rg(*w) {
                        send(*w, dw);
                    }
                    if rg(*b) {
                        send(*b, db);
                    }
                }
                Op::Conv2d { x, k, b } => {
                    let (dx, dk, db) = kernels::conv2d_backward(val(*x), val(*k), &g, rg(*x));
                    if let Some(dx) = dx {
                        send(*x, dx);
                    }
                    if rg(*k) {
                        send(*k, dk);
                    }
                    if rg(*b) {
                        send(*b, db);
                    }
                }
                Op::MaxPool { x, argmax } => {
                    send(*x, kernels::maxpool2d_backward(val(*x).shape(), argmax, &g));
                }
                Op::Upsample { x } => {
                    send(*x, kernels::upsample2x_backward(val(*x).shape(), &g));
                }
                Op::Act { x, kind } => {
                    let out = &node.value;
                    let data = match kind {
                        // Subgradient 0 at exactly 0.
                        Activation::Relu => out
                            .data()
                            .iter()
                            .zip(g.data())
                            .map(|(&y, &d)| if y > T::zero() { d } else { T::zero() })
                            .collect(),
                        Activation::Sigmoid => out
                            .data()
                            .iter()
                            .zip(g.data())
                            .map(|(&s, &d)| d * s * (T::one() - s))
                            .collect(),
                    };
                    send(*x, Tensor::new(out.shape().to_vec(), data)?);
                }
                Op::Softmax { x } => {
                    let s = &node.value;
                    let k = s.dim(1);
                    let mut data = Vec::with_capacity(s.len());
                    for (srow, grow) in s.data().chunks_exact(k).zip(g.data().chunks_exact(k)) {
                        let dot: T = srow.iter().zip(grow).map(|(&a, &b)| a * b).sum();
                        data.extend(srow.iter().zip(grow).map(|(&sv, &gv)| sv * (gv - dot)));
                    }
                    send(*x, Tensor::new(s.shape().to_vec(), data)?);
                }
                Op::Reshape { x } => {
                    send(*x, g.reshape(val(*x).shape().to_vec())?);
                }
                Op::Concat { a, b } => {
                    let (wa, wb) = (val(*a).dim(1), val(*b).dim(1));
                    let n = val(*a).dim(0);
                    let mut da = Vec::with_capacity(n * wa);
                    let mut db = Vec::with_capacity(n * wb);
                    for row in g.data().chunks_exact(wa + wb) {
                        da.extend_from_slice(&row[..wa]);
                        db.extend_from_slice(&row[wa..]);
                    }
                    if rg(*a) {
                        send(*a, Tensor::new(vec![n, wa], da)?);
                    }
                    if rg(*b) {
                        send(*b, Tensor::new(vec![n, wb], db)?);
                    }
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let k = probs.dim(1);
                    let scale = g.item() / T::of(labels.len() as f64);
                    let mut d = probs.clone();
                    for (row, &y) in d.data_mut().chunks_exact_mut(k).zip(labels) {
                        row[y] = row[y] - T::one();
                        row.iter_mut().for_each(|v| *v = *v * scale);
                    }
                    send(*logits, d);
                }
                Op::Mse { a, b } => {
                    let (ta, tb) = (val(*a), val(*b));
                    let scale = g.item() * T::of(2.0) / T::of(ta.len() as f64);
                    let diff: Vec<T> = ta
                        .data()
                        .iter()
                        .zip(tb.data())
                        .map(|(&x, &y)| (x - y) * scale)
                        .collect();
                    let da = Tensor::new(ta.shape().to_vec(), diff)?;
                    if rg(*b) {
                        send(*b, da.map(|v| -v));
                    }
                    if rg(*a) {
                        send(*a, da);
                    }
                }
                Op::Sum { x } => {
                    send(*x, Tensor::full(val(*x).shape().to_vec(), g.item()));
                }
                Op::Add { a, b } => {
                    if rg(*a) {
                        send(*a, g.clone());
                    }
                    if rg(*b) {
                        send(*b, g);
                    }
                }
                Op::Scale { x, factor } => {
                    let f = *factor;
                    send(*x, g.map(|v| v * f));
                }
            }
        }
        if !grads.all_finite() {
            return Err(Error::Numeric("backward pass".into()));
        }
        Ok(grads)
    }
}
