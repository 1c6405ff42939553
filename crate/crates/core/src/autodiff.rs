//! Execution backends and reverse-mode differentiation.
//!
//! Network code is written once against [`Backend`]. [`Eager`] evaluates on
//! plain tensors; [`Tape`] records every operation so [`Tape::backward`] can
//! replay them in reverse and produce leaf gradients.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::TensorError;
use crate::ops::broadcast::{self, BinaryOp};
use crate::ops::conv::{self as convk};
use crate::ops::norm::{self, NormGroup};
use crate::ops::pointwise;
use crate::ops::pool::{self, PoolMode};
use crate::tensor::{Real, Shape, Tensor4};

type Res<V> = Result<V, TensorError>;

/// Elementwise single-input operations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Abs,
    Sqrt,
    Sigmoid,
    Relu,
    /// `x^p`.
    Powf(f64),
    /// `c·x`.
    Scale(f64),
    /// `x + c`.
    Offset(f64),
    /// Clamp into `[lo, hi]`.
    Clamp(f64, f64),
}

impl Unary {
    fn forward<T: Real>(self, x: T) -> T {
        match self {
            Unary::Abs => x.abs(),
            Unary::Sqrt => x.sqrt(),
            Unary::Sigmoid => pointwise::sigmoid_scalar(x),
            Unary::Relu => x.max(T::zero()),
            Unary::Powf(p) => x.powf(T::lit(p)),
            Unary::Scale(c) => x * T::lit(c),
            Unary::Offset(c) => x + T::lit(c),
            Unary::Clamp(lo, hi) => x.max(T::lit(lo)).min(T::lit(hi)),
        }
    }

    /// Local derivative given input `x` and output `y`.
    fn derivative<T: Real>(self, x: T, y: T) -> T {
        let zero = T::zero();
        match self {
            Unary::Abs => {
                if x > zero {
                    T::one()
                } else if x < zero {
                    -T::one()
                } else {
                    zero
                }
            }
            // The kink at zero gets a zero subgradient.
            Unary::Sqrt => {
                if y > zero {
                    T::lit(0.5) / y
                } else {
                    zero
                }
            }
            Unary::Sigmoid => y * (T::one() - y),
            Unary::Relu => {
                if x > zero {
                    T::one()
                } else {
                    zero
                }
            }
            Unary::Powf(p) => {
                if x == zero && p < 1.0 {
                    zero
                } else {
                    T::lit(p) * x.powf(T::lit(p - 1.0))
                }
            }
            Unary::Scale(c) => T::lit(c),
            Unary::Offset(_) => T::one(),
            Unary::Clamp(lo, hi) => {
                if x >= T::lit(lo) && x <= T::lit(hi) {
                    T::one()
                } else {
                    zero
                }
            }
        }
    }
}

/// The operation set network code is written against.
///
/// Per-channel parameter vectors (biases, slopes, gains, padding values) are
/// `(1, C, 1, 1)` tensors.
pub trait Backend<T: Real> {
    type V: Clone;

    /// Introduces a value that never receives a gradient.
    fn constant(&mut self, t: Tensor4<T>) -> Self::V;
    fn value<'a>(&'a self, v: &'a Self::V) -> &'a Tensor4<T>;

    fn conv2d(
        &mut self,
        x: &Self::V,
        w: &Self::V,
        b: Option<&Self::V>,
        margin: usize,
    ) -> Res<Self::V>;
    fn depthwise_conv2d(
        &mut self,
        x: &Self::V,
        w: &Self::V,
        b: Option<&Self::V>,
        margin: usize,
    ) -> Res<Self::V>;
    /// Pads by `margin` with the per-channel constants in `values` (zeros when `None`).
    fn pad(&mut self, x: &Self::V, margin: usize, values: Option<&Self::V>) -> Res<Self::V>;
    fn binary(&mut self, op: BinaryOp, a: &Self::V, b: &Self::V) -> Res<Self::V>;
    fn unary(&mut self, op: Unary, x: &Self::V) -> Self::V;
    fn reshape(&mut self, x: &Self::V, shape: Shape) -> Res<Self::V>;
    fn global_pool(&mut self, x: &Self::V, mode: PoolMode) -> Res<Self::V>;
    fn channel_pool(&mut self, x: &Self::V, mode: PoolMode) -> Res<Self::V>;
    fn concat_channels(&mut self, a: &Self::V, b: &Self::V) -> Res<Self::V>;
    fn prelu(&mut self, x: &Self::V, slopes: &Self::V) -> Res<Self::V>;
    fn layer_norm(
        &mut self,
        x: &Self::V,
        gain: &Self::V,
        shift: &Self::V,
        eps: f64,
        group: NormGroup,
    ) -> Res<Self::V>;
    fn avg_pool2(&mut self, x: &Self::V) -> Res<Self::V>;
    /// Sum of all elements as a `(1, 1, 1, 1)` tensor.
    fn sum_all(&mut self, x: &Self::V) -> Self::V;

    fn add(&mut self, a: &Self::V, b: &Self::V) -> Res<Self::V> {
        self.binary(BinaryOp::Add, a, b)
    }
    fn sub(&mut self, a: &Self::V, b: &Self::V) -> Res<Self::V> {
        self.binary(BinaryOp::Sub, a, b)
    }
    fn mul(&mut self, a: &Self::V, b: &Self::V) -> Res<Self::V> {
        self.binary(BinaryOp::Mul, a, b)
    }
    fn div(&mut self, a: &Self::V, b: &Self::V) -> Res<Self::V> {
        self.binary(BinaryOp::Div, a, b)
    }
    fn scale(&mut self, x: &Self::V, c: f64) -> Self::V {
        self.unary(Unary::Scale(c), x)
    }
    fn offset(&mut self, x: &Self::V, c: f64) -> Self::V {
        self.unary(Unary::Offset(c), x)
    }
    fn sigmoid(&mut self, x: &Self::V) -> Self::V {
        self.unary(Unary::Sigmoid, x)
    }
    fn relu(&mut self, x: &Self::V) -> Self::V {
        self.unary(Unary::Relu, x)
    }
    fn mean_all(&mut self, x: &Self::V) -> Self::V {
        let n = self.value(x).numel() as f64;
        let s = self.sum_all(x);
        self.scale(&s, 1.0 / n)
    }
}

fn bias_data<T: Real>(b: Option<&Tensor4<T>>) -> Option<&[T]> {
    b.map(|t| t.data())
}

/// Plain evaluation without recording.
#[derive(Clone, Copy, Debug, Default)]
pub struct Eager;

impl<T: Real> Backend<T> for Eager {
    type V = Tensor4<T>;

    fn constant(&mut self, t: Tensor4<T>) -> Tensor4<T> {
        t
    }

    fn value<'a>(&'a self, v: &'a Tensor4<T>) -> &'a Tensor4<T> {
        v
    }

    fn conv2d(
        &mut self,
        x: &Tensor4<T>,
        w: &Tensor4<T>,
        b: Option<&Tensor4<T>>,
        margin: usize,
    ) -> Res<Tensor4<T>> {
        convk::conv2d_raw(x, w, bias_data(b), margin)
    }

    fn depthwise_conv2d(
        &mut self,
        x: &Tensor4<T>,
        w: &Tensor4<T>,
        b: Option<&Tensor4<T>>,
        margin: usize,
    ) -> Res<Tensor4<T>> {
        convk::depthwise_conv2d_raw(x, w, bias_data(b), margin)
    }

    fn pad(
        &mut self,
        x: &Tensor4<T>,
        margin: usize,
        values: Option<&Tensor4<T>>,
    ) -> Res<Tensor4<T>> {
        convk::pad_channel_constant(x, margin, bias_data(values))
    }

    fn binary(&mut self, op: BinaryOp, a: &Tensor4<T>, b: &Tensor4<T>) -> Res<Tensor4<T>> {
        broadcast::binary(op, a, b)
    }

    fn unary(&mut self, op: Unary, x: &Tensor4<T>) -> Tensor4<T> {
        x.map(|v| op.forward(v))
    }

    fn reshape(&mut self, x: &Tensor4<T>, shape: Shape) -> Res<Tensor4<T>> {
        x.reshape(shape)
    }

    fn global_pool(&mut self, x: &Tensor4<T>, mode: PoolMode) -> Res<Tensor4<T>> {
        Ok(pool::global_pool_spatial(x, mode)?.value)
    }

    fn channel_pool(&mut self, x: &Tensor4<T>, mode: PoolMode) -> Res<Tensor4<T>> {
        Ok(pool::pool_over_channels(x, mode)?.value)
    }

    fn concat_channels(&mut self, a: &Tensor4<T>, b: &Tensor4<T>) -> Res<Tensor4<T>> {
        pool::concat_channels(a, b)
    }

    fn prelu(&mut self, x: &Tensor4<T>, slopes: &Tensor4<T>) -> Res<Tensor4<T>> {
        pointwise::prelu(x, slopes.data())
    }

    fn layer_norm(
        &mut self,
        x: &Tensor4<T>,
        gain: &Tensor4<T>,
        shift: &Tensor4<T>,
        eps: f64,
        group: NormGroup,
    ) -> Res<Tensor4<T>> {
        Ok(norm::layer_norm(x, gain.data(), shift.data(), T::lit(eps), group)?.value)
    }

    fn avg_pool2(&mut self, x: &Tensor4<T>) -> Res<Tensor4<T>> {
        pool::avg_pool2(x)
    }

    fn sum_all(&mut self, x: &Tensor4<T>) -> Tensor4<T> {
        Tensor4::scalar(x.sum())
    }
}

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

enum Op<T> {
    Leaf,
    Constant,
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        margin: usize,
    },
    Depthwise {
        x: usize,
        w: usize,
        b: Option<usize>,
        margin: usize,
    },
    Pad {
        x: usize,
        margin: usize,
        values: Option<usize>,
    },
    Binary {
        op: BinaryOp,
        a: usize,
        b: usize,
    },
    Unary {
        op: Unary,
        x: usize,
    },
    Reshape {
        x: usize,
    },
    Pool {
        x: usize,
        mode: PoolMode,
        argmax: Vec<usize>,
        over_channels: bool,
    },
    Concat {
        a: usize,
        b: usize,
    },
    Prelu {
        x: usize,
        slopes: usize,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        shift: usize,
        group: NormGroup,
        xhat: Tensor4<T>,
        rstd: Vec<T>,
    },
    AvgPool2 {
        x: usize,
    },
    SumAll {
        x: usize,
    },
}

struct Node<T> {
    value: Tensor4<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Linear record of executed operations.
///
/// One tape belongs to one forward/backward pass; nodes are appended in
/// execution order and [`Tape::backward`] walks them in reverse.
pub struct Tape<T> {
    id: u64,
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    tape: u64,
    grads: Vec<Option<Tensor4<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf, or `None` when the output does not depend on it.
    pub fn get(&self, v: &Var) -> Option<&Tensor4<T>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index).and_then(|g| g.as_ref())
    }

    /// Like [`Gradients::get`] but returns zeros shaped like `like` when absent.
    pub fn get_or_zeros(&self, v: &Var, like: &Tensor4<T>) -> Tensor4<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor4::zeros(like.shape()))
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a differentiable input.
    pub fn leaf(&mut self, t: Tensor4<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    fn push(&mut self, value: Tensor4<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn idx(&self, v: &Var) -> usize {
        assert_eq!(v.tape, self.id, "variable used on a foreign tape");
        v.index
    }

    fn val(&self, v: &Var) -> &Tensor4<T> {
        &self.nodes[self.idx(v)].value
    }

    fn rg(&self, ids: &[Option<usize>]) -> bool {
        ids.iter().flatten().any(|&i| self.nodes[i].requires_grad)
    }

    /// Reverse-mode sweep from a scalar output.
    pub fn backward(&self, output: &Var) -> Result<Gradients<T>, TensorError> {
        if output.tape != self.id || output.index >= self.nodes.len() {
            return Err(TensorError::NotOnTape);
        }
        let out_shape = self.nodes[output.index].value.shape();
        if out_shape != [1, 1, 1, 1] {
            return Err(TensorError::NonScalar(out_shape));
        }
        let mut grads: Vec<Option<Tensor4<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.index] = Some(Tensor4::scalar(T::one()));
        for i in (0..=output.index).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) {
                grads[i] = None;
            }
        }
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor4<T>>], i: usize, g: Tensor4<T>) {
        if !self.nodes[i].requires_grad {
            return;
        }
        match &mut grads[i] {
            Some(acc) => {
                for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a = *a + *v;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(
        &self,
        node: &Node<T>,
        g: &Tensor4<T>,
        grads: &mut [Option<Tensor4<T>>],
    ) -> Result<(), TensorError> {
        let v = |i: usize| &self.nodes[i].value;
        let needs = |i: usize| self.nodes[i].requires_grad;
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Conv2d { x, w, b, margin } => {
                if needs(*x) {
                    let dx = convk::conv2d_backward_input(g, v(*w), v(*x).shape(), *margin)?;
                    self.accumulate(grads, *x, dx);
                }
                if needs(*w) {
                    let dw = convk::conv2d_backward_weight(v(*x), g, v(*w).shape(), *margin)?;
                    self.accumulate(grads, *w, dw);
                }
                if let Some(b) = b {
                    let db = Tensor4::channel_vector(&convk::channel_sums(g));
                    self.accumulate(grads, *b, db.reshape(v(*b).shape())?);
                }
            }
            Op::Depthwise { x, w, b, margin } => {
                let (dx, dw) = convk::depthwise_conv2d_backward(v(*x), v(*w), g, *margin)?;
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *w, dw);
                if let Some(b) = b {
                    let db = Tensor4::channel_vector(&convk::channel_sums(g));
                    self.accumulate(grads, *b, db.reshape(v(*b).shape())?);
                }
            }
            Op::Pad { x, margin, values } => {
                let (dx, border) = convk::pad_channel_constant_backward(g, *margin)?;
                self.accumulate(grads, *x, dx);
                if let Some(p) = values {
                    let dv = Tensor4::channel_vector(&border).reshape(v(*p).shape())?;
                    self.accumulate(grads, *p, dv);
                }
            }
            Op::Binary { op, a, b } => {
                let (ga, gb) = broadcast::binary_backward(*op, v(*a), v(*b), g);
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Unary { op, x } => {
                let xs = v(*x);
                let mut dx = g.clone();
                for ((d, &xi), &yi) in dx
                    .data_mut()
                    .iter_mut()
                    .zip(xs.data())
                    .zip(node.value.data())
                {
                    *d = *d * op.derivative(xi, yi);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Reshape { x } => {
                self.accumulate(grads, *x, g.reshape(v(*x).shape())?);
            }
            Op::Pool {
                x,
                mode,
                argmax,
                over_channels,
            } => {
                let dx = pool::pool_backward(g, v(*x).shape(), *mode, argmax, *over_channels);
                self.accumulate(grads, *x, dx);
            }
            Op::Concat { a, b } => {
                let (ga, gb) = pool::split_channels(g, v(*a).c());
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Prelu { x, slopes } => {
                let (dx, ds) = pointwise::prelu_backward(v(*x), v(*slopes).data(), g)?;
                self.accumulate(grads, *x, dx);
                let ds = Tensor4::channel_vector(&ds).reshape(v(*slopes).shape())?;
                self.accumulate(grads, *slopes, ds);
            }
            Op::LayerNorm {
                x,
                gain,
                shift,
                group,
                xhat,
                rstd,
            } => {
                let (dx, dg, ds) =
                    norm::layer_norm_backward(g, xhat, rstd, v(*gain).data(), *group);
                self.accumulate(grads, *x, dx);
                let gshape = v(*gain).shape();
                self.accumulate(grads, *gain, Tensor4::channel_vector(&dg).reshape(gshape)?);
                let sshape = v(*shift).shape();
                self.accumulate(grads, *shift, Tensor4::channel_vector(&ds).reshape(sshape)?);
            }
            Op::AvgPool2 { x } => {
                self.accumulate(grads, *x, pool::avg_pool2_backward(g, v(*x).shape()));
            }
            Op::SumAll { x } => {
                self.accumulate(grads, *x, Tensor4::full(v(*x).shape(), g.data()[0]));
            }
        }
        Ok(())
    }
}

impl<T: Real> Backend<T> for Tape<T> {
    type V = Var;

    fn constant(&mut self, t: Tensor4<T>) -> Var {
        self.push(t, Op::Constant, false)
    }

    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor4<T> {
        self.val(v)
    }

    fn conv2d(&mut self, x: &Var, w: &Var, b: Option<&Var>, margin: usize) -> Res<Var> {
        let out = convk::conv2d_raw(
            self.val(x),
            self.val(w),
            b.map(|b| self.val(b).data()),
            margin,
        )?;
        let (x, w, b) = (self.idx(x), self.idx(w), b.map(|b| self.idx(b)));
        let rg = self.rg(&[Some(x), Some(w), b]);
        Ok(self.push(out, Op::Conv2d { x, w, b, margin }, rg))
    }

    fn depthwise_conv2d(&mut self, x: &Var, w: &Var, b: Option<&Var>, margin: usize) -> Res<Var> {
        let out = convk::depthwise_conv2d_raw(
            self.val(x),
            self.val(w),
            b.map(|b| self.val(b).data()),
            margin,
        )?;
        let (x, w, b) = (self.idx(x), self.idx(w), b.map(|b| self.idx(b)));
        let rg = self.rg(&[Some(x), Some(w), b]);
        Ok(self.push(out, Op::Depthwise { x, w, b, margin }, rg))
    }

    fn pad(&mut self, x: &Var, margin: usize, values: Option<&Var>) -> Res<Var> {
        let out =
            convk::pad_channel_constant(self.val(x), margin, values.map(|p| self.val(p).data()))?;
        let (x, values) = (self.idx(x), values.map(|p| self.idx(p)));
        let rg = self.rg(&[Some(x), values]);
        Ok(self.push(out, Op::Pad { x, margin, values }, rg))
    }

    fn binary(&mut self, op: BinaryOp, a: &Var, b: &Var) -> Res<Var> {
        let out = broadcast::binary(op, self.val(a), self.val(b))?;
        let (a, b) = (self.idx(a), self.idx(b));
        let rg = self.rg(&[Some(a), Some(b)]);
        Ok(self.push(out, Op::Binary { op, a, b }, rg))
    }

    fn unary(&mut self, op: Unary, x: &Var) -> Var {
        let out = self.val(x).map(|v| op.forward(v));
        let x = self.idx(x);
        let rg = self.rg(&[Some(x)]);
        self.push(out, Op::Unary { op, x }, rg)
    }

    fn reshape(&mut self, x: &Var, shape: Shape) -> Res<Var> {
        let out = self.val(x).reshape(shape)?;
        let x = self.idx(x);
        let rg = self.rg(&[Some(x)]);
        Ok(self.push(out, Op::Reshape { x }, rg))
    }

    fn global_pool(&mut self, x: &Var, mode: PoolMode) -> Res<Var> {
        let p = pool::global_pool_spatial(self.val(x), mode)?;
        let x = self.idx(x);
        let rg = self.rg(&[Some(x)]);
        Ok(self.push(
            p.value,
            Op::Pool {
                x,
                mode,
                argmax: p.argmax,
                over_channels: false,
            },
            rg,
        ))
    }

    fn channel_pool(&mut self, x: &Var, mode: PoolMode) -> Res<Var> {
        let p = pool::pool_over_channels(self.val(x), mode)?;
        let x = self.idx(x);
        let rg = self.rg(&[Some(x)]);
        Ok(self.push(
            p.value,
            Op::Pool {
                x,
                mode,
                argmax: p.argmax,
                over_channels: true,
            },
            rg,
        ))
    }

    fn concat_channels(&mut self, a: &Var, b: &Var) -> Res<Var> {
        let out = pool::concat_channels(self.val(a), self.val(b))?;
        let (a, b) = (self.idx(a), self.idx(b));
        let rg = self.rg(&[Some(a), Some(b)]);
        Ok(self.push(out, Op::Concat { a, b }, rg))
    }

    fn prelu(&mut self, x: &Var, slopes: &Var) -> Res<Var> {
        let out = pointwise::prelu(self.val(x), self.val(slopes).data())?;
        let (x, slopes) = (self.idx(x), self.idx(slopes));
        let rg = self.rg(&[Some(x), Some(slopes)]);
        Ok(self.push(out, Op::Prelu { x, slopes }, rg))
    }

    fn layer_norm(
        &mut self,
        x: &Var,
        gain: &Var,
        shift: &Var,
        eps: f64,
        group: NormGroup,
    ) -> Res<Var> {
        let n = norm::layer_norm(
            self.val(x),
            self.val(gain).data(),
            self.val(shift).data(),
            T::lit(eps),
            group,
        )?;
        let (x, gain, shift) = (self.idx(x), self.idx(gain), self.idx(shift));
        let rg = self.rg(&[Some(x), Some(gain), Some(shift)]);
        Ok(self.push(
            n.value,
            Op::LayerNorm {
                x,
                gain,
                shift,
                group,
                xhat: n.xhat,
                rstd: n.rstd,
            },
            rg,
        ))
    }

    fn avg_pool2(&mut self, x: &Var) -> Res<Var> {
        let out = pool::avg_pool2(self.val(x))?;
        let x = self.idx(x);
        let rg = self.rg(&[Some(x)]);
        Ok(self.push(out, Op::AvgPool2 { x }, rg))
    }

    fn sum_all(&mut self, x: &Var) -> Var {
        let out = Tensor4::scalar(self.val(x).sum());
        let x = self.idx(x);
        let rg = self.rg(&[Some(x)]);
        self.push(out, Op::SumAll { x }, rg)
    }
}

/// Outcome of comparing tape gradients against central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Worst relative error per input.
    pub max_rel_error: Vec<f64>,
    /// Flat index of the worst element per input.
    pub worst_index: Vec<usize>,
    /// Tape gradient per input (for diagnostics).
    pub analytic: Vec<Tensor4<f64>>,
    pub numeric: Vec<Tensor4<f64>>,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.max_rel_error.iter().cloned().fold(0.0, f64::max)
    }
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Checks every element of every input against central finite differences
/// with the given `step`. `f` must build a scalar on the supplied tape.
pub fn check_gradients<F>(
    inputs: &[Tensor4<f64>],
    step: f64,
    floor: f64,
    f: F,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let eval = |xs: &[Tensor4<f64>]| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(&out).data()[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(&out)?;

    let mut report = GradCheckReport {
        max_rel_error: Vec::new(),
        worst_index: Vec::new(),
        analytic: Vec::new(),
        numeric: Vec::new(),
    };
    let mut work = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(v, &inputs[k]);
        let mut numeric = Tensor4::zeros(inputs[k].shape());
        let (mut worst, mut at) = (0.0, 0);
        for i in 0..inputs[k].numel() {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + step;
            let up = eval(&work)?;
            work[k].data_mut()[i] = orig - step;
            let down = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * step);
            numeric.data_mut()[i] = fd;
            let e = relative_error(analytic.data()[i], fd, floor);
            if e > worst {
                worst = e;
                at = i;
            }
        }
        report.max_rel_error.push(worst);
        report.worst_index.push(at);
        report.analytic.push(analytic);
        report.numeric.push(numeric);
    }
    Ok(report)
}
