//! Stride-1 cross-correlation kernels: dense (im2col + GEMM) and depthwise.
//!
//! All kernels take an explicit zero-padding `margin`. Per-channel constant
//! padding is done up front with [`pad_channel_constant`], after which the
//! convolution runs with margin 0.

use crate::error::TensorError;
use crate::tensor::{Real, Tensor4};

/// A convolution's weights and optional bias.
///
/// Weights are `(out, in, kh, kw)` for dense kernels and `(C, 1, kh, kw)` for
/// depthwise kernels; the bias is a `(1, out, 1, 1)` channel vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv<P> {
    pub weight: P,
    pub bias: Option<P>,
}

pub type ConvKernel<T> = Conv<Tensor4<T>>;
pub type DepthwiseKernel<T> = Conv<Tensor4<T>>;

impl<P> Conv<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> Conv<Q> {
        Conv {
            weight: f(&self.weight),
            bias: self.bias.as_ref().map(f),
        }
    }
}

impl<T: Real> ConvKernel<T> {
    pub fn zeros(out_c: usize, in_c: usize, k: usize, with_bias: bool) -> Self {
        Self {
            weight: Tensor4::zeros([out_c, in_c, k, k]),
            bias: with_bias.then(|| Tensor4::zeros([1, out_c, 1, 1])),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel_size(&self) -> (usize, usize) {
        (self.weight.shape()[2], self.weight.shape()[3])
    }

    pub fn bias_slice(&self) -> Option<&[T]> {
        self.bias.as_ref().map(|b| b.data())
    }

    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.as_ref().map_or(0, |b| b.numel())
    }
}

/// Border handling for [`conv2d`] and [`depthwise_conv2d`].
#[derive(Clone, Copy, Debug)]
pub enum Padding<'a, T> {
    /// Zero padding of the given margin on every side.
    Zero(usize),
    /// Border filled with one constant per input channel.
    Constant { margin: usize, values: &'a [T] },
}

impl<T> Padding<'_, T> {
    /// Margin that keeps the spatial size for an odd `k×k` kernel.
    pub fn same(k: usize) -> Self {
        Padding::Zero(k / 2)
    }
}

fn out_extent(size: usize, margin: usize, k: usize) -> Result<usize, TensorError> {
    (size + 2 * margin)
        .checked_sub(k)
        .map(|v| v + 1)
        .filter(|&v| v > 0)
        .ok_or_else(|| {
            TensorError::InvalidArgument(format!(
                "kernel {k} larger than padded extent {}",
                size + 2 * margin
            ))
        })
}

fn check_bias(bias: Option<&[impl Sized]>, out_c: usize) -> Result<(), TensorError> {
    match bias {
        Some(b) if b.len() != out_c => Err(TensorError::LengthMismatch {
            what: "bias",
            expected: out_c,
            got: b.len(),
        }),
        _ => Ok(()),
    }
}

/// Border-fills every (n, c) plane with `values[c]` (zero when `None`).
pub fn pad_channel_constant<T: Real>(
    input: &Tensor4<T>,
    margin: usize,
    values: Option<&[T]>,
) -> Result<Tensor4<T>, TensorError> {
    let [n, c, h, w] = input.shape();
    if let Some(v) = values {
        if v.len() != c {
            return Err(TensorError::LengthMismatch {
                what: "padding values",
                expected: c,
                got: v.len(),
            });
        }
    }
    if margin == 0 {
        return Ok(input.clone());
    }
    let (ph, pw) = (h + 2 * margin, w + 2 * margin);
    let mut out = Tensor4::zeros([n, c, ph, pw]);
    for b in 0..n {
        for ch in 0..c {
            let fill = values.map_or(T::zero(), |v| v[ch]);
            let src = input.plane(b, ch);
            let dst = out.plane_mut(b, ch);
            dst.iter_mut().for_each(|d| *d = fill);
            for y in 0..h {
                let row = (y + margin) * pw + margin;
                dst[row..row + w].copy_from_slice(&src[y * w..(y + 1) * w]);
            }
        }
    }
    Ok(out)
}

/// Gradient of [`pad_channel_constant`]: (input gradient, per-channel border sums).
pub fn pad_channel_constant_backward<T: Real>(
    grad: &Tensor4<T>,
    margin: usize,
) -> Result<(Tensor4<T>, Vec<T>), TensorError> {
    let inner = grad.crop_center(margin)?;
    let [n, c, _, _] = grad.shape();
    let mut border = vec![T::zero(); c];
    for (ch, acc) in border.iter_mut().enumerate() {
        for b in 0..n {
            let total: T = grad.plane(b, ch).iter().copied().sum();
            let core: T = inner.plane(b, ch).iter().copied().sum();
            *acc = *acc + (total - core);
        }
    }
    Ok((inner, border))
}

/// Unfolds one image `(c, h, w)` into a `(c·kh·kw) × (oh·ow)` matrix.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(
    img: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    margin: usize,
    oh: usize,
    ow: usize,
    cols: &mut [T],
) {
    let p = oh * ow;
    for ch in 0..c {
        let plane = &img[ch * h * w..(ch + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = &mut cols[((ch * kh + ky) * kw + kx) * p..][..p];
                for oy in 0..oh {
                    let iy = oy as isize + ky as isize - margin as isize;
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = ox as isize + kx as isize - margin as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Folds a column matrix back onto an image, accumulating overlaps.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    margin: usize,
    oh: usize,
    ow: usize,
    img: &mut [T],
) {
    let p = oh * ow;
    for ch in 0..c {
        let plane = &mut img[ch * h * w..(ch + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = &cols[((ch * kh + ky) * kw + kx) * p..][..p];
                for oy in 0..oh {
                    let iy = oy as isize + ky as isize - margin as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = ox as isize + kx as isize - margin as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] = dst[ix as usize] + row[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

struct ConvGeometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    margin: usize,
}

impl ConvGeometry {
    fn new<T: Real>(
        op: &'static str,
        input: [usize; 4],
        weight: &Tensor4<T>,
        margin: usize,
    ) -> Result<Self, TensorError> {
        let [n, c, h, w] = input;
        let [o, ci, kh, kw] = weight.shape();
        if ci != c {
            return Err(TensorError::ChannelMismatch {
                op,
                expected: ci,
                got: c,
            });
        }
        if h == 0 || w == 0 {
            return Err(TensorError::EmptySpatial(op));
        }
        Ok(Self {
            n,
            c,
            h,
            w,
            o,
            kh,
            kw,
            oh: out_extent(h, margin, kh)?,
            ow: out_extent(w, margin, kw)?,
            margin,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.margin == 0
    }

    fn patch_len(&self) -> usize {
        self.c * self.kh * self.kw
    }
}

/// Dense convolution with zero padding `margin` and an optional bias slice.
pub fn conv2d_raw<T: Real>(
    input: &Tensor4<T>,
    weight: &Tensor4<T>,
    bias: Option<&[T]>,
    margin: usize,
) -> Result<Tensor4<T>, TensorError> {
    let g = ConvGeometry::new("conv2d", input.shape(), weight, margin)?;
    check_bias(bias, g.o)?;
    let p = g.oh * g.ow;
    let mut out = Tensor4::zeros([g.n, g.o, g.oh, g.ow]);
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); g.patch_len() * p]
    };
    let item_in = g.c * g.h * g.w;
    let item_out = g.o * p;
    for b in 0..g.n {
        let img = &input.data()[b * item_in..(b + 1) * item_in];
        let dst = &mut out.data_mut()[b * item_out..(b + 1) * item_out];
        if let Some(bias) = bias {
            for (oc, &bv) in bias.iter().enumerate() {
                dst[oc * p..(oc + 1) * p].iter_mut().for_each(|v| *v = bv);
            }
        }
        let rhs: &[T] = if g.is_pointwise() {
            img
        } else {
            im2col(
                img, g.c, g.h, g.w, g.kh, g.kw, g.margin, g.oh, g.ow, &mut cols,
            );
            &cols
        };
        T::gemm(
            g.o,
            g.patch_len(),
            p,
            weight.data(),
            false,
            rhs,
            false,
            dst,
            true,
        );
    }
    Ok(out)
}

/// Input gradient of [`conv2d_raw`].
pub fn conv2d_backward_input<T: Real>(
    grad_out: &Tensor4<T>,
    weight: &Tensor4<T>,
    input_shape: [usize; 4],
    margin: usize,
) -> Result<Tensor4<T>, TensorError> {
    let g = ConvGeometry::new("conv2d_backward_input", input_shape, weight, margin)?;
    grad_out.expect_shape([g.n, g.o, g.oh, g.ow], "conv2d_backward_input")?;
    let p = g.oh * g.ow;
    let mut dx = Tensor4::zeros(input_shape);
    let mut cols = vec![T::zero(); g.patch_len() * p];
    let item_in = g.c * g.h * g.w;
    let item_out = g.o * p;
    for b in 0..g.n {
        let dy = &grad_out.data()[b * item_out..(b + 1) * item_out];
        let dst = &mut dx.data_mut()[b * item_in..(b + 1) * item_in];
        if g.is_pointwise() {
            T::gemm(g.c, g.o, p, weight.data(), true, dy, false, dst, false);
        } else {
            T::gemm(
                g.patch_len(),
                g.o,
                p,
                weight.data(),
                true,
                dy,
                false,
                &mut cols,
                false,
            );
            col2im(&cols, g.c, g.h, g.w, g.kh, g.kw, g.margin, g.oh, g.ow, dst);
        }
    }
    Ok(dx)
}

/// Weight gradient of [`conv2d_raw`].
pub fn conv2d_backward_weight<T: Real>(
    input: &Tensor4<T>,
    grad_out: &Tensor4<T>,
    weight_shape: [usize; 4],
    margin: usize,
) -> Result<Tensor4<T>, TensorError> {
    let probe = Tensor4::<T>::zeros([
        weight_shape[0],
        weight_shape[1],
        weight_shape[2],
        weight_shape[3],
    ]);
    let g = ConvGeometry::new("conv2d_backward_weight", input.shape(), &probe, margin)?;
    grad_out.expect_shape([g.n, g.o, g.oh, g.ow], "conv2d_backward_weight")?;
    let p = g.oh * g.ow;
    let mut dw = Tensor4::zeros(weight_shape);
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); g.patch_len() * p]
    };
    let item_in = g.c * g.h * g.w;
    let item_out = g.o * p;
    for b in 0..g.n {
        let img = &input.data()[b * item_in..(b + 1) * item_in];
        let dy = &grad_out.data()[b * item_out..(b + 1) * item_out];
        let rhs: &[T] = if g.is_pointwise() {
            img
        } else {
            im2col(
                img, g.c, g.h, g.w, g.kh, g.kw, g.margin, g.oh, g.ow, &mut cols,
            );
            &cols
        };
        T::gemm(
            g.o,
            p,
            g.patch_len(),
            dy,
            false,
            rhs,
            true,
            dw.data_mut(),
            true,
        );
    }
    Ok(dw)
}

/// Per-channel sum over batch and space; the gradient of a broadcast bias.
pub fn channel_sums<T: Real>(t: &Tensor4<T>) -> Vec<T> {
    let [n, c, _, _] = t.shape();
    (0..c)
        .map(|ch| {
            (0..n)
                .map(|b| t.plane(b, ch).iter().copied().sum::<T>())
                .sum()
        })
        .collect()
}

fn depthwise_geometry<T: Real>(
    op: &'static str,
    input: [usize; 4],
    weight: &Tensor4<T>,
    margin: usize,
) -> Result<(usize, usize), TensorError> {
    let [_, c, h, w] = input;
    let [wc, one, kh, kw] = weight.shape();
    if wc != c {
        return Err(TensorError::ChannelMismatch {
            op,
            expected: wc,
            got: c,
        });
    }
    if one != 1 {
        return Err(TensorError::InvalidArgument(format!(
            "{op}: depthwise weight must be (C,1,kh,kw), got {:?}",
            weight.shape()
        )));
    }
    if h == 0 || w == 0 {
        return Err(TensorError::EmptySpatial(op));
    }
    Ok((out_extent(h, margin, kh)?, out_extent(w, margin, kw)?))
}

/// Depthwise convolution: channel `c` of the output sees only channel `c` of
/// the input, through the kernel `weight[c, 0]`.
pub fn depthwise_conv2d_raw<T: Real>(
    input: &Tensor4<T>,
    weight: &Tensor4<T>,
    bias: Option<&[T]>,
    margin: usize,
) -> Result<Tensor4<T>, TensorError> {
    let (oh, ow) = depthwise_geometry("depthwise_conv2d", input.shape(), weight, margin)?;
    let [n, c, h, w] = input.shape();
    let [_, _, kh, kw] = weight.shape();
    check_bias(bias, c)?;
    let mut out = Tensor4::zeros([n, c, oh, ow]);
    for b in 0..n {
        for ch in 0..c {
            let k = &weight.data()[ch * kh * kw..(ch + 1) * kh * kw];
            let src = input.plane(b, ch);
            let init = bias.map_or(T::zero(), |bv| bv[ch]);
            let dst = out.plane_mut(b, ch);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = init;
                    for ky in 0..kh {
                        let iy = oy as isize + ky as isize - margin as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = ox as isize + kx as isize - margin as isize;
                            if ix >= 0 && ix < w as isize {
                                acc = acc + k[ky * kw + kx] * src[iy as usize * w + ix as usize];
                            }
                        }
                    }
                    dst[oy * ow + ox] = acc;
                }
            }
        }
    }
    Ok(out)
}

/// Input and weight gradients of [`depthwise_conv2d_raw`].
pub fn depthwise_conv2d_backward<T: Real>(
    input: &Tensor4<T>,
    weight: &Tensor4<T>,
    grad_out: &Tensor4<T>,
    margin: usize,
) -> Result<(Tensor4<T>, Tensor4<T>), TensorError> {
    let (oh, ow) = depthwise_geometry("depthwise_conv2d_backward", input.shape(), weight, margin)?;
    let [n, c, h, w] = input.shape();
    let [_, _, kh, kw] = weight.shape();
    grad_out.expect_shape([n, c, oh, ow], "depthwise_conv2d_backward")?;
    let mut dx = Tensor4::zeros(input.shape());
    let mut dw = Tensor4::zeros(weight.shape());
    for b in 0..n {
        for ch in 0..c {
            let k = &weight.data()[ch * kh * kw..(ch + 1) * kh * kw];
            let src = input.plane(b, ch);
            let dy = grad_out.plane(b, ch);
            let mut dk = vec![T::zero(); kh * kw];
            let dxp = dx.plane_mut(b, ch);
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = dy[oy * ow + ox];
                    for ky in 0..kh {
                        let iy = oy as isize + ky as isize - margin as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = ox as isize + kx as isize - margin as isize;
                            if ix >= 0 && ix < w as isize {
                                let at = iy as usize * w + ix as usize;
                                dxp[at] = dxp[at] + k[ky * kw + kx] * g;
                                dk[ky * kw + kx] = dk[ky * kw + kx] + src[at] * g;
                            }
                        }
                    }
                }
            }
            let dst = &mut dw.data_mut()[ch * kh * kw..(ch + 1) * kh * kw];
            for (d, v) in dst.iter_mut().zip(dk) {
                *d = *d + v;
            }
        }
    }
    Ok((dx, dw))
}

fn apply_padding<'a, T: Real>(
    input: &'a Tensor4<T>,
    padding: Padding<'_, T>,
) -> Result<(std::borrow::Cow<'a, Tensor4<T>>, usize), TensorError> {
    Ok(match padding {
        Padding::Zero(m) => (std::borrow::Cow::Borrowed(input), m),
        Padding::Constant { margin, values } => (
            std::borrow::Cow::Owned(pad_channel_constant(input, margin, Some(values))?),
            0,
        ),
    })
}

/// Dense stride-1 convolution of `input` by `kernel`.
pub fn conv2d<T: Real>(
    input: &Tensor4<T>,
    kernel: &ConvKernel<T>,
    padding: Padding<'_, T>,
) -> Result<Tensor4<T>, TensorError> {
    let (x, margin) = apply_padding(input, padding)?;
    conv2d_raw(&x, &kernel.weight, kernel.bias_slice(), margin)
}

/// Depthwise stride-1 convolution of `input` by `kernel`.
pub fn depthwise_conv2d<T: Real>(
    input: &Tensor4<T>,
    kernel: &DepthwiseKernel<T>,
    padding: Padding<'_, T>,
) -> Result<Tensor4<T>, TensorError> {
    let (x, margin) = apply_padding(input, padding)?;
    depthwise_conv2d_raw(&x, &kernel.weight, kernel.bias_slice(), margin)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{nested_conv, random_tensor};

    fn identity3(c: usize) -> ConvKernel<f64> {
        let mut k = ConvKernel::zeros(c, c, 3, false);
        for ch in 0..c {
            k.weight.set(ch, ch, 1, 1, 1.0);
        }
        k
    }

    #[test]
    fn identity_kernel_is_exact() {
        let x = random_tensor([2, 3, 5, 7], 1);
        let y = conv2d(&x, &identity3(3), Padding::Zero(1)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn single_pixel_all_ones() {
        let x = Tensor4::scalar(0.7f64);
        let k = ConvKernel {
            weight: Tensor4::full([1, 1, 3, 3], 1.0),
            bias: Some(Tensor4::zeros([1, 1, 1, 1])),
        };
        let y = conv2d(&x, &k, Padding::Zero(1)).unwrap();
        assert_eq!(y.data(), &[0.7]);
    }

    #[test]
    fn matches_nested_loop_oracle() {
        let x = random_tensor([1, 2, 4, 4], 2);
        let k = ConvKernel {
            weight: random_tensor([3, 2, 3, 3], 3),
            bias: Some(random_tensor([1, 3, 1, 1], 4)),
        };
        let fast = conv2d(&x, &k, Padding::Zero(1)).unwrap();
        let slow = nested_conv(&x, &k.weight, k.bias_slice(), 1, None);
        assert!(fast.max_abs_diff(&slow).unwrap() <= 1e-12);
    }

    #[test]
    fn constant_padding_matches_oracle() {
        let x = random_tensor([2, 2, 5, 3], 5);
        let k = ConvKernel {
            weight: random_tensor([2, 2, 3, 3], 6),
            bias: None,
        };
        let vals = [0.3, -1.2];
        let fast = conv2d(
            &x,
            &k,
            Padding::Constant {
                margin: 1,
                values: &vals,
            },
        )
        .unwrap();
        let slow = nested_conv(&x, &k.weight, None, 1, Some(&vals));
        assert!(fast.max_abs_diff(&slow).unwrap() <= 1e-12);
    }

    #[test]
    fn pointwise_and_seven_by_seven() {
        let x = random_tensor([2, 3, 9, 8], 7);
        for (k, m) in [(1, 0), (7, 3)] {
            let w = random_tensor([2, 3, k, k], 8);
            let fast = conv2d_raw(&x, &w, None, m).unwrap();
            let slow = nested_conv(&x, &w, None, m, None);
            assert!(fast.max_abs_diff(&slow).unwrap() <= 1e-12);
            assert_eq!(fast.shape(), [2, 2, 9, 8]);
        }
    }

    #[test]
    fn channel_mismatch_and_empty_are_errors() {
        let k = ConvKernel::<f64>::zeros(2, 3, 3, true);
        let x = Tensor4::zeros([1, 2, 4, 4]);
        assert!(matches!(
            conv2d(&x, &k, Padding::Zero(1)),
            Err(TensorError::ChannelMismatch { .. })
        ));
        let e = Tensor4::zeros([1, 3, 0, 4]);
        assert!(matches!(
            conv2d(&e, &k, Padding::Zero(1)),
            Err(TensorError::EmptySpatial(_))
        ));
    }

    #[test]
    fn depthwise_identity_and_isolation() {
        let x = random_tensor([1, 2, 6, 5], 9);
        let mut k = DepthwiseKernel::<f64> {
            weight: Tensor4::zeros([2, 1, 3, 3]),
            bias: None,
        };
        k.weight.set(1, 0, 1, 1, 1.0);
        let y = depthwise_conv2d(&x, &k, Padding::Zero(1)).unwrap();
        assert!(y.plane(0, 0).iter().all(|&v| v == 0.0));
        assert_eq!(y.plane(0, 1), x.plane(0, 1));
        k.weight.set(0, 0, 1, 1, 1.0);
        assert_eq!(depthwise_conv2d(&x, &k, Padding::Zero(1)).unwrap(), x);
    }

    #[test]
    fn depthwise_matches_dense_block_diagonal() {
        let x = random_tensor([2, 3, 6, 7], 10);
        let w = random_tensor([3, 1, 3, 3], 11);
        let bias = [0.1, -0.2, 0.3];
        let mut dense = Tensor4::zeros([3, 3, 3, 3]);
        for c in 0..3 {
            for y in 0..3 {
                for xx in 0..3 {
                    dense.set(c, c, y, xx, w.get(c, 0, y, xx));
                }
            }
        }
        let a = depthwise_conv2d_raw(&x, &w, Some(&bias), 1).unwrap();
        let b = nested_conv(&x, &dense, Some(&bias), 1, None);
        assert!(a.max_abs_diff(&b).unwrap() <= 1e-12);
    }

    #[test]
    fn pad_examples() {
        let x = random_tensor([1, 2, 3, 4], 12);
        assert_eq!(pad_channel_constant(&x, 0, Some(&[1.0, 2.0])).unwrap(), x);
        let one = Tensor4::scalar(7.0f64);
        let p = pad_channel_constant(&one, 1, Some(&[2.0])).unwrap();
        assert_eq!(p.data(), &[2.0, 2.0, 2.0, 2.0, 7.0, 2.0, 2.0, 2.0, 2.0]);
        let padded = pad_channel_constant(&x, 2, Some(&[1.0, 2.0])).unwrap();
        assert_eq!(padded.crop_center(2).unwrap(), x);
        assert!(pad_channel_constant(&x, 1, Some(&[1.0])).is_err());
    }
}
