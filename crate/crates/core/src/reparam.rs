//! Kirsch-guided reparameterization block.
//!
//! At training time the block runs ten parallel linear branches on the same
//! input `x` (C channels):
//!
//! * normal: `W_n * x + B_n` (3×3, C→C);
//! * expand/squeeze: a 1×1 C→D expansion followed by a 3×3 D→C squeeze;
//! * one edge branch per stencil `K_i` of the operator bank: a 1×1 C→C
//!   mixing conv followed by the depthwise kernel `S_i ⊙ K_i` and bias `B_Ki`.
//!
//! The outputs are summed. Because every branch is linear, the whole block
//! folds into a single 3×3 convolution `(W_rep, B_rep)`.
//!
//! Two-stage branches pad their intermediate feature with that stage's own
//! bias rather than with zeros. A zero-padded input `x` maps to exactly that
//! bias under the first (1×1) stage, so this padding rule makes the training
//! form and the fused form agree at every pixel including the borders.

use rand::Rng;

use crate::autodiff::{Backend, Eager};
use crate::error::TensorError;
use crate::kirsch::{stencil_tensor, EdgeOperator, Stencil};
use crate::ops::conv::{conv2d_raw, Conv, ConvKernel};
use crate::tensor::{Real, Tensor4};

/// Default channel expansion factor `D / C` of the expand/squeeze branch.
pub const EXPANSION: usize = 2;

/// Initial value of every edge-branch scale `S_i`.
pub const EDGE_SCALE_INIT: f64 = 1.0 / 8.0;

/// Trainable parameters of one edge branch.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeBranch<P> {
    /// 1×1 C→C mixing conv `(W_i, B_i)`.
    pub pre: Conv<P>,
    /// Per-channel stencil scale `S_i`, shape `(C, 1, 1, 1)`.
    pub scale: P,
    /// Per-channel output bias `B_Ki`, shape `(1, C, 1, 1)`.
    pub bias: P,
}

impl<P> EdgeBranch<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> EdgeBranch<Q> {
        EdgeBranch {
            pre: self.pre.map(f),
            scale: f(&self.scale),
            bias: f(&self.bias),
        }
    }
}

/// Training-form parameters of the block. Generic over the parameter
/// representation so the same structure can hold tensors or tape handles.
#[derive(Clone, Debug, PartialEq)]
pub struct Krm<P> {
    pub normal: Conv<P>,
    pub expand: Conv<P>,
    pub squeeze: Conv<P>,
    /// Frozen stencil bank; one entry of `edges` per stencil.
    pub operator: EdgeOperator,
    pub edges: Vec<EdgeBranch<P>>,
}

pub type KrmWeights<T> = Krm<Tensor4<T>>;

impl<P> Krm<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> Krm<Q> {
        Krm {
            normal: self.normal.map(f),
            expand: self.expand.map(f),
            squeeze: self.squeeze.map(f),
            operator: self.operator,
            edges: self.edges.iter().map(|e| e.map(f)).collect(),
        }
    }
}

/// Inference form: one 3×3 C→C convolution `(W_rep, B_rep)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedConv<T> {
    pub kernel: ConvKernel<T>,
}

impl<T: Real> FusedConv<T> {
    pub fn param_count(&self) -> usize {
        self.kernel.param_count()
    }

    pub fn channels(&self) -> usize {
        self.kernel.out_channels()
    }
}

fn uniform<T: Real, R: Rng>(shape: [usize; 4], bound: f64, rng: &mut R) -> Tensor4<T> {
    Tensor4::from_fn(shape, |_, _, _, _| T::lit(rng.random_range(-bound..=bound)))
}

/// Fan-in scaled uniform initialization `U(-1/√fan_in, 1/√fan_in)`.
pub fn init_conv<T: Real, R: Rng>(
    out_c: usize,
    in_c: usize,
    k: usize,
    with_bias: bool,
    rng: &mut R,
) -> ConvKernel<T> {
    let bound = 1.0 / ((in_c * k * k) as f64).sqrt();
    Conv {
        weight: uniform([out_c, in_c, k, k], bound, rng),
        bias: with_bias.then(|| Tensor4::zeros([1, out_c, 1, 1])),
    }
}

impl<T: Real> KrmWeights<T> {
    /// All-zero block with `expansion·channels` hidden channels.
    pub fn zeros(channels: usize, expansion: usize, operator: EdgeOperator) -> Self {
        let c = channels;
        let d = expansion * c;
        Krm {
            normal: ConvKernel::zeros(c, c, 3, true),
            expand: ConvKernel::zeros(d, c, 1, true),
            squeeze: ConvKernel::zeros(c, d, 3, true),
            operator,
            edges: (0..operator.branch_count())
                .map(|_| EdgeBranch {
                    pre: ConvKernel::zeros(c, c, 1, true),
                    scale: Tensor4::zeros([c, 1, 1, 1]),
                    bias: Tensor4::zeros([1, c, 1, 1]),
                })
                .collect(),
        }
    }

    /// Training initialization: fan-in uniform weights, zero biases and every
    /// edge scale at [`EDGE_SCALE_INIT`].
    pub fn init<R: Rng>(
        channels: usize,
        expansion: usize,
        operator: EdgeOperator,
        rng: &mut R,
    ) -> Self {
        let c = channels;
        let d = expansion * c;
        Krm {
            normal: init_conv(c, c, 3, true, rng),
            expand: init_conv(d, c, 1, true, rng),
            squeeze: init_conv(c, d, 3, true, rng),
            operator,
            edges: (0..operator.branch_count())
                .map(|_| EdgeBranch {
                    pre: init_conv(c, c, 1, true, rng),
                    scale: Tensor4::full([c, 1, 1, 1], T::lit(EDGE_SCALE_INIT)),
                    bias: Tensor4::zeros([1, c, 1, 1]),
                })
                .collect(),
        }
    }

    pub fn channels(&self) -> usize {
        self.normal.out_channels()
    }

    pub fn hidden_channels(&self) -> usize {
        self.expand.out_channels()
    }

    /// Number of scalar parameters in the training form.
    pub fn param_count(&self) -> usize {
        self.normal.param_count()
            + self.expand.param_count()
            + self.squeeze.param_count()
            + self
                .edges
                .iter()
                .map(|e| e.pre.param_count() + e.scale.numel() + e.bias.numel())
                .sum::<usize>()
    }

    /// Training-form forward on plain tensors.
    pub fn forward(&self, x: &Tensor4<T>) -> Result<Tensor4<T>, TensorError> {
        krm_forward_training(&mut Eager, x, self)
    }
}

/// Closed-form training-form parameter count for `C` channels, `D = e·C`.
pub fn krm_param_count(channels: usize, expansion: usize, branches: usize) -> usize {
    let c = channels;
    let d = expansion * c;
    (c * c * 9 + c) + (d * c + d) + (d * c * 9 + c) + branches * ((c * c + c) + 2 * c)
}

/// Closed-form fused parameter count for `C` channels.
pub fn fused_param_count(channels: usize) -> usize {
    channels * channels * 9 + channels
}

/// Multiplications per output pixel of the training form: normal `9C²`,
/// expand `DC`, squeeze `9DC`, and per edge branch `C²` mixing plus `9C`
/// depthwise.
pub fn krm_training_macs_per_pixel(channels: usize, expansion: usize, branches: usize) -> u64 {
    let (c, d) = (channels as u64, (expansion * channels) as u64);
    9 * c * c + d * c + 9 * d * c + branches as u64 * (c * c + 9 * c)
}

/// Multiplications per output pixel of the fused form: `9C²`.
pub fn fused_macs_per_pixel(channels: usize) -> u64 {
    9 * (channels as u64).pow(2)
}

/// Ten-branch (for Kirsch) training forward.
pub fn krm_forward_training<T: Real, B: Backend<T>>(
    b: &mut B,
    x: &B::V,
    w: &Krm<B::V>,
) -> Result<B::V, TensorError> {
    let c = b.value(&w.normal.weight).shape()[1];
    if b.value(x).c() != c {
        return Err(TensorError::ChannelMismatch {
            op: "krm_forward_training",
            expected: c,
            got: b.value(x).c(),
        });
    }
    let mut acc = b.conv2d(x, &w.normal.weight, w.normal.bias.as_ref(), 1)?;

    let hidden = b.conv2d(x, &w.expand.weight, w.expand.bias.as_ref(), 0)?;
    let hidden = b.pad(&hidden, 1, w.expand.bias.as_ref())?;
    let es = b.conv2d(&hidden, &w.squeeze.weight, w.squeeze.bias.as_ref(), 0)?;
    acc = b.add(&acc, &es)?;

    for (branch, stencil) in w.edges.iter().zip(w.operator.stencils()) {
        let mixed = b.conv2d(x, &branch.pre.weight, branch.pre.bias.as_ref(), 0)?;
        let mixed = b.pad(&mixed, 1, branch.pre.bias.as_ref())?;
        let k = b.constant(stencil_tensor(&stencil));
        let kernel = b.mul(&branch.scale, &k)?;
        let edge = b.depthwise_conv2d(&mixed, &kernel, Some(&branch.bias), 0)?;
        acc = b.add(&acc, &edge)?;
    }
    Ok(acc)
}

/// Folds a 1×1 expansion followed by a 3×3 squeeze into one 3×3 kernel.
///
/// `W_es[o, c] = Σ_d W_s[o, d] · W_e[d, c]` and
/// `B_es[o] = B_s[o] + Σ_{d, ky, kx} W_s[o, d, ky, kx] · B_e[d]`.
pub fn fuse_expand_squeeze<T: Real>(
    expand: &ConvKernel<T>,
    squeeze: &ConvKernel<T>,
) -> Result<ConvKernel<T>, TensorError> {
    let [d, c, eh, ew] = expand.weight.shape();
    let [o, sd, kh, kw] = squeeze.weight.shape();
    if (eh, ew) != (1, 1) {
        return Err(TensorError::InvalidArgument(format!(
            "expand kernel must be 1x1, got {eh}x{ew}"
        )));
    }
    if sd != d {
        return Err(TensorError::ChannelMismatch {
            op: "fuse_expand_squeeze",
            expected: d,
            got: sd,
        });
    }
    // W_s viewed as (o·kk, d) against W_e (d, c): permute W_s to put d last.
    let kk = kh * kw;
    let mut ws_perm = vec![T::zero(); o * kk * d];
    for oc in 0..o {
        for dc in 0..d {
            for p in 0..kk {
                ws_perm[(oc * kk + p) * d + dc] = squeeze.weight.data()[(oc * d + dc) * kk + p];
            }
        }
    }
    let mut prod = vec![T::zero(); o * kk * c];
    T::gemm(
        o * kk,
        d,
        c,
        &ws_perm,
        false,
        expand.weight.data(),
        false,
        &mut prod,
        false,
    );
    let mut weight = Tensor4::zeros([o, c, kh, kw]);
    for oc in 0..o {
        for ic in 0..c {
            for p in 0..kk {
                weight.data_mut()[(oc * c + ic) * kk + p] = prod[(oc * kk + p) * c + ic];
            }
        }
    }

    let be = expand.bias_slice();
    let bias: Vec<T> = (0..o)
        .map(|oc| {
            let base = squeeze.bias_slice().map_or(T::zero(), |b| b[oc]);
            let Some(be) = be else { return base };
            let mut acc = base;
            for (dc, &bv) in be.iter().enumerate() {
                let taps: T = squeeze.weight.data()[(oc * d + dc) * kk..(oc * d + dc + 1) * kk]
                    .iter()
                    .copied()
                    .sum();
                acc = acc + taps * bv;
            }
            acc
        })
        .collect();
    Ok(Conv {
        weight,
        bias: Some(Tensor4::channel_vector(&bias)),
    })
}

/// Folds a 1×1 C→C mixing conv followed by the depthwise kernel
/// `scale[c] · stencil` and bias into one dense 3×3 kernel.
///
/// `W[c, c'] = scale[c] · stencil · W_pre[c, c']` and
/// `B[c] = bias[c] + scale[c] · (Σ stencil) · B_pre[c]`.
pub fn fuse_kirsch_branch<T: Real>(
    pre: &ConvKernel<T>,
    scale: &[T],
    stencil: &Stencil,
    bias: &[T],
) -> Result<ConvKernel<T>, TensorError> {
    let [o, c, kh, kw] = pre.weight.shape();
    if (kh, kw) != (1, 1) || o != c {
        return Err(TensorError::InvalidArgument(format!(
            "edge pre-conv must be 1x1 CxC, got {:?}",
            pre.weight.shape()
        )));
    }
    for (what, v) in [("edge scale", scale), ("edge bias", bias)] {
        if v.len() != c {
            return Err(TensorError::LengthMismatch {
                what,
                expected: c,
                got: v.len(),
            });
        }
    }
    let mut weight = Tensor4::zeros([c, c, 3, 3]);
    for oc in 0..c {
        for ic in 0..c {
            let mix = pre.weight.get(oc, ic, 0, 0) * scale[oc];
            for ky in 0..3 {
                for kx in 0..3 {
                    weight.set(oc, ic, ky, kx, mix * T::lit(stencil[ky][kx] as f64));
                }
            }
        }
    }
    let taps = T::lit(stencil.iter().flatten().map(|&v| v as f64).sum());
    let fused_bias: Vec<T> = (0..c)
        .map(|ch| {
            let carried = pre.bias_slice().map_or(T::zero(), |b| b[ch]);
            bias[ch] + scale[ch] * taps * carried
        })
        .collect();
    Ok(Conv {
        weight,
        bias: Some(Tensor4::channel_vector(&fused_bias)),
    })
}

fn add_into<T: Real>(acc: &mut ConvKernel<T>, k: &ConvKernel<T>) -> Result<(), TensorError> {
    acc.weight.expect_shape(k.weight.shape(), "fuse_krm")?;
    for (a, v) in acc.weight.data_mut().iter_mut().zip(k.weight.data()) {
        *a = *a + *v;
    }
    if let (Some(ab), Some(kb)) = (acc.bias.as_mut(), k.bias.as_ref()) {
        for (a, v) in ab.data_mut().iter_mut().zip(kb.data()) {
            *a = *a + *v;
        }
    }
    Ok(())
}

/// `W_rep = W_n + W_es + Σ_i W_i'`, `B_rep = B_n + B_es + Σ_i B_i'`.
pub fn fuse_krm<T: Real>(w: &KrmWeights<T>) -> Result<FusedConv<T>, TensorError> {
    let c = w.channels();
    if w.normal.kernel_size() != (3, 3) || w.normal.in_channels() != c {
        return Err(TensorError::InvalidArgument(format!(
            "normal branch must be 3x3 CxC, got {:?}",
            w.normal.weight.shape()
        )));
    }
    if w.edges.len() != w.operator.branch_count() {
        return Err(TensorError::LengthMismatch {
            what: "edge branches",
            expected: w.operator.branch_count(),
            got: w.edges.len(),
        });
    }
    let mut acc = Conv {
        weight: w.normal.weight.clone(),
        bias: Some(
            w.normal
                .bias
                .clone()
                .unwrap_or_else(|| Tensor4::zeros([1, c, 1, 1])),
        ),
    };
    add_into(&mut acc, &fuse_expand_squeeze(&w.expand, &w.squeeze)?)?;
    for (branch, stencil) in w.edges.iter().zip(w.operator.stencils()) {
        let k = fuse_kirsch_branch(
            &branch.pre,
            branch.scale.data(),
            &stencil,
            branch.bias.data(),
        )?;
        add_into(&mut acc, &k)?;
    }
    Ok(FusedConv { kernel: acc })
}

/// Inference forward: one 3×3 convolution with zero padding.
pub fn krm_forward_fused<T: Real>(
    x: &Tensor4<T>,
    f: &FusedConv<T>,
) -> Result<Tensor4<T>, TensorError> {
    conv2d_raw(x, &f.kernel.weight, f.kernel.bias_slice(), 1)
}
