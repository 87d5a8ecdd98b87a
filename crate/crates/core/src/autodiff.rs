//! Tape-based reverse-mode differentiation.
//!
//! Every backward rule is itself written with [`Var`] operations, so calling
//! [`Graph::grad`] with `create_graph = true` records the backward pass on the
//! tape and the result can be differentiated again. The gradient penalty of
//! the critic needs exactly one such second pass.

use std::cell::{Cell, RefCell};
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{self, ConvGeometry, Real, Tensor};

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    Exp(usize),
    Tanh(usize),
    Sqrt(usize),
    Conv(usize, usize, ConvGeometry),
    ConvInputGrad(usize, usize, ConvGeometry),
    ConvWeightGrad(usize, usize, ConvGeometry),
    BroadcastTo(usize),
    SumTo(usize),
    Reshape(usize),
    Concat(Vec<usize>),
    Slice(usize, usize),
    Upsample(usize),
    UpsampleAdjoint(usize),
}

impl Op {
    fn parents(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) => vec![*a, *b],
            Conv(a, b, _) | ConvInputGrad(a, b, _) | ConvWeightGrad(a, b, _) => vec![*a, *b],
            Scale(a, _) | Offset(a) | Exp(a) | Tanh(a) | Sqrt(a) => vec![*a],
            BroadcastTo(a) | SumTo(a) | Reshape(a) | Slice(a, _) | Upsample(a) | UpsampleAdjoint(a) => vec![*a],
            Concat(parts) => parts.clone(),
        }
    }
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op,
    requires_grad: bool,
}

/// Append-only computation tape. Drop it to release all intermediate values.
pub struct Graph<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
    recording: Cell<bool>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: RefCell::new(Vec::new()), recording: Cell::new(true) }
    }

    /// A tape that never records parents: every op result is a constant.
    pub fn inference() -> Self {
        Graph { nodes: RefCell::new(Vec::new()), recording: Cell::new(false) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Tensor<T>, op: Op) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad =
            self.recording.get() && op.parents().iter().any(|&p| nodes[p].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        nodes.push(Node { value: Rc::new(value), op, requires_grad });
        Var { graph: self, id: nodes.len() - 1 }
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf)
    }

    /// A differentiable leaf (a parameter or an input we need gradients for).
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op: Op::Leaf, requires_grad: true });
        Var { graph: self, id: nodes.len() - 1 }
    }

    pub fn scalar(&self, v: f64) -> Var<'_, T> {
        self.constant(Tensor::scalar(T::lit(v)))
    }

    fn value(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Gradients of a one-element `output` with respect to each of `wrt`.
    ///
    /// Leaves unreachable from `output` get zero gradients. With
    /// `create_graph` the returned vars are themselves differentiable.
    pub fn grad<'g>(&'g self, output: Var<'g, T>, wrt: &[Var<'g, T>], create_graph: bool) -> Result<Vec<Var<'g, T>>> {
        let out_val = output.value();
        if out_val.len() != 1 {
            return Err(Error::shape("one-element loss", format!("{:?}", out_val.shape())));
        }
        let n = output.id + 1;
        // Only nodes that depend on some requested leaf need a gradient.
        let mut reaches = vec![false; self.len()];
        for w in wrt {
            reaches[w.id] = true;
        }
        {
            let nodes = self.nodes.borrow();
            for id in 0..n {
                if !reaches[id] && nodes[id].requires_grad {
                    reaches[id] = nodes[id].op.parents().iter().any(|&p| reaches[p]);
                }
            }
        }

        let saved = self.recording.replace(create_graph);
        let mut grads: Vec<Option<Var<'g, T>>> = vec![None; n];
        grads[output.id] = Some(self.constant(Tensor::full(out_val.shape(), T::one())));

        let result = (|| -> Result<()> {
            for id in (0..n).rev() {
                let Some(g) = grads[id] else { continue };
                if !reaches[id] {
                    continue;
                }
                let op = self.nodes.borrow()[id].op.clone();
                let this = Var { graph: self, id };
                let mut send = |p: usize, grad: Var<'g, T>| {
                    if reaches[p] {
                        grads[p] = Some(match grads[p] {
                            Some(acc) => acc.add(grad),
                            None => grad,
                        });
                    }
                };
                let v = |p: usize| Var { graph: self, id: p };
                match op {
                    Op::Leaf => {}
                    Op::Add(a, b) => {
                        send(a, g);
                        send(b, g);
                    }
                    Op::Sub(a, b) => {
                        send(a, g);
                        if reaches[b] {
                            send(b, g.scale(-1.0));
                        }
                    }
                    Op::Mul(a, b) => {
                        if reaches[a] {
                            send(a, g.mul(v(b)));
                        }
                        if reaches[b] {
                            send(b, g.mul(v(a)));
                        }
                    }
                    Op::Div(a, b) => {
                        if reaches[a] {
                            send(a, g.div(v(b)));
                        }
                        if reaches[b] {
                            send(b, g.mul(this).div(v(b)).scale(-1.0));
                        }
                    }
                    Op::Scale(a, c) => send(a, g.scale(c)),
                    Op::Offset(a) => send(a, g),
                    Op::Exp(a) => send(a, g.mul(this)),
                    Op::Tanh(a) => send(a, g.mul(this.mul(this).scale(-1.0).offset(1.0))),
                    Op::Sqrt(a) => send(a, g.div(this).scale(0.5)),
                    Op::Conv(x, w, geo) => {
                        let xs = v(x).value();
                        if reaches[x] {
                            send(x, g.conv2d_input_grad(v(w), geo, xs.dim(2), xs.dim(3))?);
                        }
                        if reaches[w] {
                            send(w, v(x).conv2d_weight_grad(g, geo)?);
                        }
                    }
                    Op::ConvInputGrad(gin, w, geo) => {
                        if reaches[gin] {
                            send(gin, g.conv2d(v(w), geo)?);
                        }
                        if reaches[w] {
                            send(w, g.conv2d_weight_grad(v(gin), geo)?);
                        }
                    }
                    Op::ConvWeightGrad(x, gin, geo) => {
                        if reaches[gin] {
                            send(gin, v(x).conv2d(g, geo)?);
                        }
                        if reaches[x] {
                            let xs = v(x).value();
                            send(x, v(gin).conv2d_input_grad(g, geo, xs.dim(2), xs.dim(3))?);
                        }
                    }
                    Op::BroadcastTo(a) => send(a, g.sum_to(v(a).value().shape())?),
                    Op::SumTo(a) => send(a, g.broadcast_to(v(a).value().shape())?),
                    Op::Reshape(a) => send(a, g.reshape(v(a).value().shape())?),
                    Op::Concat(parts) => {
                        let mut start = 0;
                        for p in parts {
                            let c = v(p).value().dim(1);
                            if reaches[p] {
                                send(p, g.slice_channels(start, c)?);
                            }
                            start += c;
                        }
                    }
                    Op::Slice(a, start) => {
                        let full = v(a).value();
                        let gs = g.value();
                        let mut parts = Vec::new();
                        let mut shape = full.shape().to_vec();
                        if start > 0 {
                            shape[1] = start;
                            parts.push(self.constant(Tensor::zeros(&shape)));
                        }
                        parts.push(g);
                        let rest = full.dim(1) - start - gs.dim(1);
                        if rest > 0 {
                            shape[1] = rest;
                            parts.push(self.constant(Tensor::zeros(&shape)));
                        }
                        send(a, Var::concat_channels(&parts)?);
                    }
                    Op::Upsample(a) => {
                        let s = v(a).value();
                        send(a, g.upsample_adjoint(s.dim(2), s.dim(3))?);
                    }
                    Op::UpsampleAdjoint(a) => {
                        let s = v(a).value();
                        send(a, g.upsample(s.dim(2), s.dim(3))?);
                    }
                }
            }
            Ok(())
        })();
        self.recording.set(saved);
        result?;

        Ok(wrt
            .iter()
            .map(|w| match grads.get(w.id).copied().flatten() {
                Some(g) => g,
                None => self.constant(Tensor::zeros(w.value().shape())),
            })
            .collect())
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Real> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<T: Real> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.value())
    }
}

impl<'g, T: Real> Var<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires_grad(self.id)
    }

    /// Scalar value of a one-element var as `f64`.
    pub fn item(&self) -> f64 {
        self.value().item().as_f64()
    }

    pub fn detach(&self) -> Var<'g, T> {
        self.graph.constant((*self.value()).clone())
    }

    fn same_shape(&self, other: &Var<'g, T>, what: &str) {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "{}: operand shapes differ", what);
    }

    pub fn add(self, other: Var<'g, T>) -> Var<'g, T> {
        self.same_shape(&other, "add");
        let v = self.value().zip_map(&other.value(), |a, b| a + b);
        self.graph.push(v, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'g, T>) -> Var<'g, T> {
        self.same_shape(&other, "sub");
        let v = self.value().zip_map(&other.value(), |a, b| a - b);
        self.graph.push(v, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'g, T>) -> Var<'g, T> {
        self.same_shape(&other, "mul");
        let v = self.value().zip_map(&other.value(), |a, b| a * b);
        self.graph.push(v, Op::Mul(self.id, other.id))
    }

    pub fn div(self, other: Var<'g, T>) -> Var<'g, T> {
        self.same_shape(&other, "div");
        let v = self.value().zip_map(&other.value(), |a, b| a / b);
        self.graph.push(v, Op::Div(self.id, other.id))
    }

    pub fn scale(self, c: f64) -> Var<'g, T> {
        let k = T::lit(c);
        let v = self.value().map(|a| a * k);
        self.graph.push(v, Op::Scale(self.id, c))
    }

    pub fn offset(self, c: f64) -> Var<'g, T> {
        let k = T::lit(c);
        let v = self.value().map(|a| a + k);
        self.graph.push(v, Op::Offset(self.id))
    }

    pub fn exp(self) -> Var<'g, T> {
        let v = self.value().map(|a| a.exp());
        self.graph.push(v, Op::Exp(self.id))
    }

    pub fn tanh(self) -> Var<'g, T> {
        let v = self.value().map(|a| a.tanh());
        self.graph.push(v, Op::Tanh(self.id))
    }

    pub fn sqrt(self) -> Var<'g, T> {
        let v = self.value().map(|a| a.sqrt());
        self.graph.push(v, Op::Sqrt(self.id))
    }

    pub fn square(self) -> Var<'g, T> {
        self.mul(self)
    }

    /// Elementwise product with a constant mask derived from the current value.
    fn masked(self, f: impl Fn(T) -> T) -> Var<'g, T> {
        let mask = self.value().map(f);
        self.mul(self.graph.constant(mask))
    }

    /// `|x|` with subgradient 0 at 0.
    pub fn abs(self) -> Var<'g, T> {
        self.masked(|a| {
            if a > T::zero() {
                T::one()
            } else if a < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        })
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'g, T> {
        let s = T::lit(slope);
        self.masked(move |a| if a > T::zero() { T::one() } else { s })
    }

    pub fn relu(self) -> Var<'g, T> {
        self.masked(|a| if a > T::zero() { T::one() } else { T::zero() })
    }

    /// Clamp into `[lo, hi]`; the gradient is zero where the bound is active.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'g, T> {
        let (l, h) = (T::lit(lo), T::lit(hi));
        let value = self.value();
        let inside = value.map(|a| if a >= l && a <= h { T::one() } else { T::zero() });
        let pinned = value.map(|a| if a < l { l } else if a > h { h } else { T::zero() });
        self.mul(self.graph.constant(inside)).add(self.graph.constant(pinned))
    }

    pub fn conv2d(self, w: Var<'g, T>, geo: ConvGeometry) -> Result<Var<'g, T>> {
        let v = tensor::conv2d(&self.value(), &w.value(), geo)?;
        Ok(self.graph.push(v, Op::Conv(self.id, w.id, geo)))
    }

    fn conv2d_input_grad(self, w: Var<'g, T>, geo: ConvGeometry, h: usize, wd: usize) -> Result<Var<'g, T>> {
        let v = tensor::conv2d_input_grad(&self.value(), &w.value(), geo, h, wd)?;
        Ok(self.graph.push(v, Op::ConvInputGrad(self.id, w.id, geo)))
    }

    fn conv2d_weight_grad(self, g: Var<'g, T>, geo: ConvGeometry) -> Result<Var<'g, T>> {
        let v = tensor::conv2d_weight_grad(&self.value(), &g.value(), geo)?;
        Ok(self.graph.push(v, Op::ConvWeightGrad(self.id, g.id, geo)))
    }

    pub fn broadcast_to(self, shape: &[usize]) -> Result<Var<'g, T>> {
        if self.value().shape() == shape {
            return Ok(self);
        }
        let v = self.value().broadcast_to(shape)?;
        Ok(self.graph.push(v, Op::BroadcastTo(self.id)))
    }

    pub fn sum_to(self, shape: &[usize]) -> Result<Var<'g, T>> {
        if self.value().shape() == shape {
            return Ok(self);
        }
        let v = self.value().sum_to(shape)?;
        Ok(self.graph.push(v, Op::SumTo(self.id)))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g, T>> {
        let v = (*self.value()).clone().reshape(shape)?;
        Ok(self.graph.push(v, Op::Reshape(self.id)))
    }

    /// Sum of all elements as a `[]`-shaped var.
    pub fn sum(self) -> Var<'g, T> {
        let rank = self.value().shape().len();
        let ones = vec![1; rank];
        let s = self.sum_to(&ones).expect("reduce to ones is always valid");
        s.reshape(&[]).expect("one element")
    }

    pub fn mean(self) -> Var<'g, T> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Per-item sum over all non-batch axes: `[N, ...]` → `[N]`.
    pub fn sum_per_item(self) -> Result<Var<'g, T>> {
        let shape = self.shape();
        let mut keep = vec![1; shape.len()];
        keep[0] = shape[0];
        self.sum_to(&keep)?.reshape(&[shape[0]])
    }

    pub fn concat_channels(parts: &[Var<'g, T>]) -> Result<Var<'g, T>> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat of zero vars"))?;
        let values: Vec<Rc<Tensor<T>>> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor<T>> = values.iter().map(|v| v.as_ref()).collect();
        let v = Tensor::concat_channels(&refs)?;
        Ok(first.graph.push(v, Op::Concat(parts.iter().map(|p| p.id).collect())))
    }

    pub fn slice_channels(self, start: usize, len: usize) -> Result<Var<'g, T>> {
        let v = self.value().slice_channels(start, len)?;
        Ok(self.graph.push(v, Op::Slice(self.id, start)))
    }

    pub fn upsample(self, oh: usize, ow: usize) -> Result<Var<'g, T>> {
        let v = tensor::upsample_nearest(&self.value(), oh, ow)?;
        Ok(self.graph.push(v, Op::Upsample(self.id)))
    }

    fn upsample_adjoint(self, h: usize, w: usize) -> Result<Var<'g, T>> {
        let v = tensor::upsample_nearest_adjoint(&self.value(), h, w)?;
        Ok(self.graph.push(v, Op::UpsampleAdjoint(self.id)))
    }

    /// Adds a per-channel bias `[C]` to an `[N, C, ...]` var.
    pub fn add_channel_bias(self, bias: Var<'g, T>) -> Result<Var<'g, T>> {
        let shape = self.shape();
        let mut bshape = vec![1; shape.len()];
        bshape[1] = shape[1];
        let b = bias.reshape(&bshape)?.broadcast_to(&shape)?;
        Ok(self.add(b))
    }
}
