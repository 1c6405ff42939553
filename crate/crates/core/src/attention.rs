//! Channel and spatial attention maps.
//!
//! Channel attention squeezes each channel to its spatial average and maximum,
//! runs both through one shared two-layer 1×1 MLP and gates with a sigmoid.
//! Spatial attention stacks the per-pixel channel average and maximum and
//! applies a 7×7 convolution followed by a sigmoid.

use rand::Rng;

use crate::autodiff::{Backend, Eager};
use crate::error::TensorError;
use crate::ops::conv::{Conv, ConvKernel};
use crate::ops::pool::PoolMode;
use crate::reparam::init_conv;
use crate::tensor::{Real, Tensor4};

/// Default channel reduction ratio of the attention MLP.
pub const REDUCTION: usize = 8;

/// Kernel size of the spatial attention convolution.
pub const SPATIAL_KERNEL: usize = 7;

/// Nonlinearity between the two MLP layers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum MlpActivation {
    #[default]
    Relu,
    Identity,
}

impl MlpActivation {
    pub fn code(self) -> u8 {
        match self {
            MlpActivation::Relu => 0,
            MlpActivation::Identity => 1,
        }
    }

    pub fn from_code(v: u8) -> Option<Self> {
        match v {
            0 => Some(MlpActivation::Relu),
            1 => Some(MlpActivation::Identity),
            _ => None,
        }
    }
}

/// Shared bias-free MLP: `reduce` is `(C/r, C, 1, 1)`, `expand` is `(C, C/r, 1, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Cam<P> {
    pub reduce: P,
    pub expand: P,
    pub activation: MlpActivation,
}

pub type CamWeights<T> = Cam<Tensor4<T>>;

impl<P> Cam<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> Cam<Q> {
        Cam {
            reduce: f(&self.reduce),
            expand: f(&self.expand),
            activation: self.activation,
        }
    }
}

fn hidden_width(channels: usize, reduction: usize) -> Result<usize, TensorError> {
    if reduction == 0 || channels % reduction != 0 {
        return Err(TensorError::InvalidArgument(format!(
            "reduction ratio {reduction} does not divide {channels} channels"
        )));
    }
    Ok(channels / reduction)
}

impl<T: Real> CamWeights<T> {
    pub fn zeros(channels: usize, reduction: usize) -> Result<Self, TensorError> {
        let h = hidden_width(channels, reduction)?;
        Ok(Cam {
            reduce: Tensor4::zeros([h, channels, 1, 1]),
            expand: Tensor4::zeros([channels, h, 1, 1]),
            activation: MlpActivation::default(),
        })
    }

    pub fn init<R: Rng>(
        channels: usize,
        reduction: usize,
        rng: &mut R,
    ) -> Result<Self, TensorError> {
        let h = hidden_width(channels, reduction)?;
        Ok(Cam {
            reduce: init_conv(h, channels, 1, false, rng).weight,
            expand: init_conv(channels, h, 1, false, rng).weight,
            activation: MlpActivation::default(),
        })
    }

    pub fn channels(&self) -> usize {
        self.reduce.shape()[1]
    }

    pub fn reduction(&self) -> usize {
        self.channels() / self.reduce.shape()[0].max(1)
    }

    pub fn param_count(&self) -> usize {
        self.reduce.numel() + self.expand.numel()
    }
}

/// 7×7 two-channel → one-channel convolution with bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Sam<P> {
    pub conv: Conv<P>,
}

pub type SamWeights<T> = Sam<Tensor4<T>>;

impl<P> Sam<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> Sam<Q> {
        Sam {
            conv: self.conv.map(f),
        }
    }
}

impl<T: Real> SamWeights<T> {
    pub fn zeros() -> Self {
        Sam {
            conv: ConvKernel::zeros(1, 2, SPATIAL_KERNEL, true),
        }
    }

    pub fn init<R: Rng>(rng: &mut R) -> Self {
        Sam {
            conv: init_conv(1, 2, SPATIAL_KERNEL, true, rng),
        }
    }

    pub fn param_count(&self) -> usize {
        self.conv.param_count()
    }
}

/// `σ(MLP(avg(x)) + MLP(max(x)))`, shape `(n, C, 1, 1)`.
pub fn channel_attention_with<T: Real, B: Backend<T>>(
    b: &mut B,
    x: &B::V,
    w: &Cam<B::V>,
) -> Result<B::V, TensorError> {
    let [hidden, c, _, _] = b.value(&w.reduce).shape();
    if b.value(x).c() != c {
        return Err(TensorError::ChannelMismatch {
            op: "channel_attention",
            expected: c,
            got: b.value(x).c(),
        });
    }
    let expected = [c, hidden, 1, 1];
    if b.value(&w.expand).shape() != expected {
        return Err(TensorError::ShapeMismatch {
            op: "channel_attention",
            expected,
            got: b.value(&w.expand).shape(),
        });
    }
    let mlp = |b: &mut B, v: &B::V| -> Result<B::V, TensorError> {
        let h = b.conv2d(v, &w.reduce, None, 0)?;
        let h = match w.activation {
            MlpActivation::Relu => b.relu(&h),
            MlpActivation::Identity => h,
        };
        b.conv2d(&h, &w.expand, None, 0)
    };
    let avg = b.global_pool(x, PoolMode::Avg)?;
    let max = b.global_pool(x, PoolMode::Max)?;
    let a = mlp(b, &avg)?;
    let m = mlp(b, &max)?;
    let s = b.add(&a, &m)?;
    Ok(b.sigmoid(&s))
}

/// `σ(conv7([avg_c(x); max_c(x)]))`, shape `(n, 1, h, w)`.
pub fn spatial_attention_with<T: Real, B: Backend<T>>(
    b: &mut B,
    x: &B::V,
    w: &Sam<B::V>,
) -> Result<B::V, TensorError> {
    let shape = b.value(&w.conv.weight).shape();
    let k = SPATIAL_KERNEL;
    if shape != [1, 2, k, k] {
        return Err(TensorError::ShapeMismatch {
            op: "spatial_attention",
            expected: [1, 2, k, k],
            got: shape,
        });
    }
    let avg = b.channel_pool(x, PoolMode::Avg)?;
    let max = b.channel_pool(x, PoolMode::Max)?;
    let stacked = b.concat_channels(&avg, &max)?;
    let logits = b.conv2d(&stacked, &w.conv.weight, w.conv.bias.as_ref(), k / 2)?;
    Ok(b.sigmoid(&logits))
}

pub fn channel_attention<T: Real>(
    x: &Tensor4<T>,
    w: &CamWeights<T>,
) -> Result<Tensor4<T>, TensorError> {
    channel_attention_with(&mut Eager, x, w)
}

pub fn spatial_attention<T: Real>(
    x: &Tensor4<T>,
    w: &SamWeights<T>,
) -> Result<Tensor4<T>, TensorError> {
    spatial_attention_with(&mut Eager, x, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{nested_conv, random_tensor};

    fn sig(v: f64) -> f64 {
        1.0 / (1.0 + (-v).exp())
    }

    fn random_cam(c: usize, r: usize, seed: u64) -> CamWeights<f64> {
        Cam {
            reduce: random_tensor([c / r, c, 1, 1], seed),
            expand: random_tensor([c, c / r, 1, 1], seed + 1),
            activation: MlpActivation::Relu,
        }
    }

    #[test]
    fn zero_weights_give_half() {
        let x = random_tensor([2, 8, 5, 4], 1);
        let cam = channel_attention(&x, &CamWeights::zeros(8, 4).unwrap()).unwrap();
        assert_eq!(cam.shape(), [2, 8, 1, 1]);
        assert!(cam.data().iter().all(|&v| v == 0.5));
        let sam = spatial_attention(&x, &SamWeights::zeros()).unwrap();
        assert_eq!(sam.shape(), [2, 1, 5, 4]);
        assert!(sam.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn reduction_must_divide() {
        assert!(CamWeights::<f64>::zeros(32, 8).is_ok());
        assert!(CamWeights::<f64>::zeros(12, 8).is_err());
        let x = random_tensor([1, 4, 3, 3], 2);
        assert!(channel_attention(&x, &random_cam(8, 2, 3)).is_err());
    }

    #[test]
    fn dense_matrix_oracle() {
        let (c, r) = (8, 2);
        let w = random_cam(c, r, 4);
        let x = random_tensor([3, c, 6, 5], 5);
        let out = channel_attention(&x, &w).unwrap();
        let hid = c / r;
        let mlp = |v: &[f64]| -> Vec<f64> {
            let h: Vec<f64> = (0..hid)
                .map(|j| {
                    (0..c)
                        .map(|i| w.reduce.get(j, i, 0, 0) * v[i])
                        .sum::<f64>()
                        .max(0.0)
                })
                .collect();
            (0..c)
                .map(|o| (0..hid).map(|j| w.expand.get(o, j, 0, 0) * h[j]).sum())
                .collect()
        };
        for b in 0..3 {
            let avg: Vec<f64> = (0..c)
                .map(|ch| x.plane(b, ch).iter().sum::<f64>() / 30.0)
                .collect();
            let max: Vec<f64> = (0..c)
                .map(|ch| x.plane(b, ch).iter().cloned().fold(f64::MIN, f64::max))
                .collect();
            let (ma, mm) = (mlp(&avg), mlp(&max));
            for ch in 0..c {
                let want = sig(ma[ch] + mm[ch]);
                assert!((out.get(b, ch, 0, 0) - want).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn constant_channels_collapse_pooling() {
        let w = random_cam(4, 2, 6);
        let levels = [0.1, -0.4, 0.7, 0.3];
        let x = Tensor4::from_fn([1, 4, 3, 5], |_, c, _, _| levels[c]);
        let out = channel_attention(&x, &w).unwrap();
        let v = Tensor4::from_fn([1, 4, 1, 1], |_, c, _, _| levels[c]);
        let mut e = Eager;
        let h = e.conv2d(&v, &w.reduce, None, 0).unwrap();
        let h = e.relu(&h);
        let m = e.conv2d(&h, &w.expand, None, 0).unwrap();
        for ch in 0..4 {
            let want = sig(2.0 * m.get(0, ch, 0, 0));
            assert!((out.get(0, ch, 0, 0) - want).abs() < 1e-15);
        }
    }

    #[test]
    fn spatial_nested_loop_oracle() {
        let w = Sam {
            conv: Conv {
                weight: random_tensor([1, 2, 7, 7], 7),
                bias: Some(random_tensor([1, 1, 1, 1], 8)),
            },
        };
        let x = random_tensor([2, 5, 9, 6], 9);
        let out = spatial_attention(&x, &w).unwrap();
        let stacked = Tensor4::from_fn([2, 2, 9, 6], |b, k, y, xx| {
            let vals: Vec<f64> = (0..5).map(|c| x.get(b, c, y, xx)).collect();
            if k == 0 {
                vals.iter().sum::<f64>() / 5.0
            } else {
                vals.iter().cloned().fold(f64::MIN, f64::max)
            }
        });
        let bias = w.conv.bias.as_ref().unwrap().data();
        let want = nested_conv(&stacked, &w.conv.weight, Some(bias), 3, None).map(sig);
        assert!(out.max_abs_diff(&want).unwrap() <= 1e-12);
    }

    #[test]
    fn single_channel_duplicates_map() {
        let w = Sam {
            conv: Conv {
                weight: random_tensor([1, 2, 7, 7], 10),
                bias: None,
            },
        };
        let x = random_tensor([1, 1, 8, 8], 11);
        let out = spatial_attention(&x, &w).unwrap();
        let dup = Tensor4::from_fn([1, 2, 8, 8], |_, _, y, xx| x.get(0, 0, y, xx));
        let want = nested_conv(&dup, &w.conv.weight, None, 3, None).map(sig);
        assert!(out.max_abs_diff(&want).unwrap() <= 1e-12);
    }

    #[test]
    fn batch_split_commutes() {
        let cam = random_cam(4, 2, 12);
        let sam =
            SamWeights::init(&mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(3));
        let x = random_tensor([3, 4, 6, 6], 13);
        let gate = |x: &Tensor4<f64>| {
            let mut e = Eager;
            let a = channel_attention(x, &cam).unwrap();
            let y = e.mul(x, &a).unwrap();
            let s = spatial_attention(&y, &sam).unwrap();
            e.mul(&y, &s).unwrap()
        };
        let whole = gate(&x);
        assert_eq!(whole.shape(), x.shape());
        for b in 0..3 {
            let part = gate(&x.batch_slice(b, 1).unwrap());
            assert_eq!(part, whole.batch_slice(b, 1).unwrap());
        }
    }
}
