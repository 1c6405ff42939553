//! Global spatial pooling, per-pixel channel pooling and 2×2 average downsampling.

use crate::error::TensorError;
use crate::tensor::{Real, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    Avg,
    Max,
}

/// Pooled values plus, for max pooling, the flat index of each winner.
pub struct Pooled<T> {
    pub value: Tensor4<T>,
    pub argmax: Vec<usize>,
}

/// Reduces every (n, c) plane to one value: `(n, c, 1, 1)`.
pub fn global_pool_spatial<T: Real>(
    input: &Tensor4<T>,
    mode: PoolMode,
) -> Result<Pooled<T>, TensorError> {
    let [n, c, h, w] = input.shape();
    if h * w == 0 {
        return Err(TensorError::EmptySpatial("global_pool_spatial"));
    }
    let hw = h * w;
    let mut out = Tensor4::zeros([n, c, 1, 1]);
    let mut argmax = Vec::new();
    for b in 0..n {
        for ch in 0..c {
            let plane = input.plane(b, ch);
            let v = match mode {
                PoolMode::Avg => plane.iter().copied().sum::<T>() / T::from_usize(hw).unwrap(),
                PoolMode::Max => {
                    let (i, v) = arg_max(plane);
                    argmax.push(input.offset(b, ch, 0, 0) + i);
                    v
                }
            };
            out.set(b, ch, 0, 0, v);
        }
    }
    Ok(Pooled { value: out, argmax })
}

fn arg_max<T: Real>(values: &[T]) -> (usize, T) {
    let mut best = (0, values[0]);
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

/// Reduces across channels at every pixel: `(n, 1, h, w)`.
pub fn pool_over_channels<T: Real>(
    input: &Tensor4<T>,
    mode: PoolMode,
) -> Result<Pooled<T>, TensorError> {
    let [n, c, h, w] = input.shape();
    if c == 0 {
        return Err(TensorError::InvalidArgument(
            "pool_over_channels needs at least one channel".into(),
        ));
    }
    let mut out = Tensor4::zeros([n, 1, h, w]);
    let mut argmax = Vec::new();
    let inv_c = T::one() / T::from_usize(c).unwrap();
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                let v = match mode {
                    PoolMode::Avg => (0..c).map(|ch| input.get(b, ch, y, x)).sum::<T>() * inv_c,
                    PoolMode::Max => {
                        let mut best = (0, input.get(b, 0, y, x));
                        for ch in 1..c {
                            let v = input.get(b, ch, y, x);
                            if v > best.1 {
                                best = (ch, v);
                            }
                        }
                        argmax.push(input.offset(b, best.0, y, x));
                        best.1
                    }
                };
                out.set(b, 0, y, x, v);
            }
        }
    }
    Ok(Pooled { value: out, argmax })
}

/// Scatters a pooled gradient back onto the input shape.
pub fn pool_backward<T: Real>(
    grad: &Tensor4<T>,
    input_shape: [usize; 4],
    mode: PoolMode,
    argmax: &[usize],
    over_channels: bool,
) -> Tensor4<T> {
    let [n, c, h, w] = input_shape;
    let mut dx = Tensor4::zeros(input_shape);
    match (mode, over_channels) {
        (PoolMode::Max, _) => {
            for (&at, &g) in argmax.iter().zip(grad.data()) {
                dx.data_mut()[at] = dx.data_mut()[at] + g;
            }
        }
        (PoolMode::Avg, false) => {
            let scale = T::one() / T::from_usize(h * w).unwrap();
            for b in 0..n {
                for ch in 0..c {
                    let g = grad.get(b, ch, 0, 0) * scale;
                    dx.plane_mut(b, ch).iter_mut().for_each(|v| *v = g);
                }
            }
        }
        (PoolMode::Avg, true) => {
            let scale = T::one() / T::from_usize(c).unwrap();
            for b in 0..n {
                let g = grad.plane(b, 0).to_vec();
                for ch in 0..c {
                    for (d, &gv) in dx.plane_mut(b, ch).iter_mut().zip(&g) {
                        *d = gv * scale;
                    }
                }
            }
        }
    }
    dx
}

/// 2×2 stride-2 average pooling; odd trailing rows/columns are dropped.
pub fn avg_pool2<T: Real>(input: &Tensor4<T>) -> Result<Tensor4<T>, TensorError> {
    let [n, c, h, w] = input.shape();
    let (oh, ow) = (h / 2, w / 2);
    if oh == 0 || ow == 0 {
        return Err(TensorError::EmptySpatial("avg_pool2"));
    }
    let q = T::lit(0.25);
    Ok(Tensor4::from_fn([n, c, oh, ow], |b, ch, y, x| {
        (input.get(b, ch, 2 * y, 2 * x)
            + input.get(b, ch, 2 * y, 2 * x + 1)
            + input.get(b, ch, 2 * y + 1, 2 * x)
            + input.get(b, ch, 2 * y + 1, 2 * x + 1))
            * q
    }))
}

pub fn avg_pool2_backward<T: Real>(grad: &Tensor4<T>, input_shape: [usize; 4]) -> Tensor4<T> {
    let mut dx = Tensor4::zeros(input_shape);
    let [n, c, oh, ow] = grad.shape();
    let q = T::lit(0.25);
    for b in 0..n {
        for ch in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    let g = grad.get(b, ch, y, x) * q;
                    for (dy, dxx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        dx.set(b, ch, 2 * y + dy, 2 * x + dxx, g);
                    }
                }
            }
        }
    }
    dx
}

/// Stacks `a` and `b` along the channel axis.
pub fn concat_channels<T: Real>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>, TensorError> {
    let [n, ca, h, w] = a.shape();
    let [nb, cb, hb, wb] = b.shape();
    if (n, h, w) != (nb, hb, wb) {
        return Err(TensorError::ShapeMismatch {
            op: "concat_channels",
            expected: [n, cb, h, w],
            got: b.shape(),
        });
    }
    let mut out = Tensor4::zeros([n, ca + cb, h, w]);
    for bi in 0..n {
        for ch in 0..ca {
            out.plane_mut(bi, ch).copy_from_slice(a.plane(bi, ch));
        }
        for ch in 0..cb {
            out.plane_mut(bi, ca + ch).copy_from_slice(b.plane(bi, ch));
        }
    }
    Ok(out)
}

/// Splits a channel-concatenated gradient back into its two parts.
pub fn split_channels<T: Real>(t: &Tensor4<T>, first: usize) -> (Tensor4<T>, Tensor4<T>) {
    let [n, c, h, w] = t.shape();
    let a = Tensor4::from_fn([n, first, h, w], |b, ch, y, x| t.get(b, ch, y, x));
    let b = Tensor4::from_fn([n, c - first, h, w], |bi, ch, y, x| {
        t.get(bi, first + ch, y, x)
    });
    (a, b)
}
