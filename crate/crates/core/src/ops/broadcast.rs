//! Elementwise binary arithmetic with size-1 broadcasting on each axis.

use crate::error::TensorError;
use crate::tensor::{Real, Shape, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryOp {
    #[inline]
    fn apply<T: Real>(self, a: T, b: T) -> T {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
            BinaryOp::Div => a / b,
        }
    }
}

pub fn broadcast_shape(a: Shape, b: Shape) -> Result<Shape, TensorError> {
    let mut out = [0; 4];
    for i in 0..4 {
        out[i] = match (a[i], b[i]) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "broadcast",
                    expected: a,
                    got: b,
                })
            }
        };
    }
    Ok(out)
}

fn strides(shape: Shape, target: Shape) -> [usize; 4] {
    let dense = [
        shape[1] * shape[2] * shape[3],
        shape[2] * shape[3],
        shape[3],
        1,
    ];
    let mut s = [0; 4];
    for i in 0..4 {
        s[i] = if shape[i] == 1 && target[i] != 1 {
            0
        } else {
            dense[i]
        };
    }
    s
}

/// Calls `f(out_index, a_index, b_index)` over the broadcast iteration space.
fn for_each_index(a: Shape, b: Shape, out: Shape, mut f: impl FnMut(usize, usize, usize)) {
    let sa = strides(a, out);
    let sb = strides(b, out);
    let mut o = 0;
    for n in 0..out[0] {
        for c in 0..out[1] {
            for y in 0..out[2] {
                let ba = n * sa[0] + c * sa[1] + y * sa[2];
                let bb = n * sb[0] + c * sb[1] + y * sb[2];
                for x in 0..out[3] {
                    f(o, ba + x * sa[3], bb + x * sb[3]);
                    o += 1;
                }
            }
        }
    }
}

pub fn binary<T: Real>(
    op: BinaryOp,
    a: &Tensor4<T>,
    b: &Tensor4<T>,
) -> Result<Tensor4<T>, TensorError> {
    let shape = broadcast_shape(a.shape(), b.shape())?;
    if a.shape() == b.shape() {
        return a.zip_map(b, |x, y| op.apply(x, y));
    }
    let mut out = Tensor4::zeros(shape);
    let (ad, bd) = (a.data(), b.data());
    let od = out.data_mut();
    for_each_index(a.shape(), b.shape(), shape, |o, ia, ib| {
        od[o] = op.apply(ad[ia], bd[ib]);
    });
    Ok(out)
}

/// Sums `grad` down to `shape` along every broadcast axis.
pub fn reduce_to_shape<T: Real>(grad: &Tensor4<T>, shape: Shape) -> Tensor4<T> {
    if grad.shape() == shape {
        return grad.clone();
    }
    let mut out = Tensor4::zeros(shape);
    let od = out.data_mut();
    let gd = grad.data();
    for_each_index(shape, shape, grad.shape(), |o, i, _| {
        od[i] = od[i] + gd[o];
    });
    out
}

/// Gradients of a broadcast binary op with respect to both operands.
pub fn binary_backward<T: Real>(
    op: BinaryOp,
    a: &Tensor4<T>,
    b: &Tensor4<T>,
    grad: &Tensor4<T>,
) -> (Tensor4<T>, Tensor4<T>) {
    let shape = grad.shape();
    let mut ga = Tensor4::zeros(shape);
    let mut gb = Tensor4::zeros(shape);
    let (ad, bd, gd) = (a.data(), b.data(), grad.data());
    {
        let (gad, gbd) = (ga.data_mut(), gb.data_mut());
        for_each_index(a.shape(), b.shape(), shape, |o, ia, ib| {
            let g = gd[o];
            let (da, db) = match op {
                BinaryOp::Add => (g, g),
                BinaryOp::Sub => (g, -g),
                BinaryOp::Mul => (g * bd[ib], g * ad[ia]),
                BinaryOp::Div => {
                    let inv = T::one() / bd[ib];
                    (g * inv, -g * ad[ia] * inv * inv)
                }
            };
            gad[o] = da;
            gbd[o] = db;
        });
    }
    (
        reduce_to_shape(&ga, a.shape()),
        reduce_to_shape(&gb, b.shape()),
    )
}
