//! Restoration losses and reference metrics.
//!
//! `total = γ₁·(1 − MS-SSIM) + γ₂·L1 + γ₃·TV`, with mean-reduced L1 and a
//! TV term normalized per element so the weights do not depend on image
//! size. Everything here is written against [`Backend`] so the same code
//! produces values and tape gradients.

use std::sync::atomic::{AtomicBool, Ordering};

use crate::autodiff::{Backend, Eager, Unary};
use crate::error::TensorError;
use crate::tensor::{Real, Tensor4};

/// Default multi-scale exponents, finest scale first.
pub const MS_SSIM_BETAS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

/// Lower bound applied to per-scale similarity terms before exponentiation.
pub const SIMILARITY_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub peak: f64,
    pub scales: usize,
    pub betas: Vec<f64>,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            peak: 1.0,
            scales: 5,
            betas: MS_SSIM_BETAS.to_vec(),
        }
    }
}

impl SsimParams {
    pub fn c1(&self) -> f64 {
        (self.k1 * self.peak).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.peak).powi(2)
    }

    /// Window actually used on an `h × w` image: the configured size, or the
    /// largest odd size that fits. Errors below 3.
    pub fn window_for(&self, h: usize, w: usize) -> Result<usize, TensorError> {
        let fit = h.min(w);
        let size = if fit >= self.window {
            self.window
        } else if fit % 2 == 1 {
            fit
        } else {
            fit.saturating_sub(1)
        };
        if size < 3 {
            return Err(TensorError::InvalidArgument(format!(
                "image {h}x{w} is too small for SSIM (needs at least 3x3)"
            )));
        }
        Ok(size)
    }

    /// Number of scales an `h × w` image supports: each scale but the last
    /// halves the image and every scale must still hold a full window.
    pub fn scales_for(&self, h: usize, w: usize) -> usize {
        let mut m = 1;
        let mut size = h.min(w);
        while m < self.scales.min(self.betas.len()) && size / 2 >= self.window {
            size /= 2;
            m += 1;
        }
        m
    }

    /// The first `m` exponents rescaled to sum to one.
    pub fn betas_for(&self, m: usize) -> Vec<f64> {
        let head = &self.betas[..m];
        let total: f64 = head.iter().sum();
        head.iter().map(|b| b / total).collect()
    }
}

/// Normalized 2-D Gaussian window as a `(c, 1, k, k)` depthwise kernel.
pub fn gaussian_kernel<T: Real>(channels: usize, size: usize, sigma: f64) -> Tensor4<T> {
    let r = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    let g: Vec<f64> = g.iter().map(|v| v / s).collect();
    Tensor4::from_fn([channels, 1, size, size], |_, _, y, x| T::lit(g[y] * g[x]))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub ms_ssim: f64,
    pub l1: f64,
    pub tv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            ms_ssim: 0.85,
            l1: 0.15,
            tv: 0.01,
        }
    }
}

/// Individual loss terms and their weighted sum.
#[derive(Clone, Debug, PartialEq)]
pub struct LossTerms<V> {
    pub ms_ssim: V,
    pub l1: V,
    pub tv: V,
    pub total: V,
}

fn same_shape<T: Real>(
    a: &Tensor4<T>,
    b: &Tensor4<T>,
    op: &'static str,
) -> Result<(), TensorError> {
    b.expect_shape(a.shape(), op)
}

/// Luminance map `l` and contrast-structure map `cs` over valid windows.
pub fn ssim_maps_with<T: Real, B: Backend<T>>(
    b: &mut B,
    x: &B::V,
    y: &B::V,
    p: &SsimParams,
) -> Result<(B::V, B::V), TensorError> {
    same_shape(b.value(x), b.value(y), "ssim")?;
    let [_, c, h, w] = b.value(x).shape();
    let size = p.window_for(h, w)?;
    let k = b.constant(gaussian_kernel(c, size, p.sigma));
    let blur = |b: &mut B, v: &B::V| b.depthwise_conv2d(v, &k, None, 0);

    let mu_x = blur(b, x)?;
    let mu_y = blur(b, y)?;
    let xx = b.mul(x, x)?;
    let yy = b.mul(y, y)?;
    let xy = b.mul(x, y)?;
    let e_xx = blur(b, &xx)?;
    let e_yy = blur(b, &yy)?;
    let e_xy = blur(b, &xy)?;
    let mu_xx = b.mul(&mu_x, &mu_x)?;
    let mu_yy = b.mul(&mu_y, &mu_y)?;
    let mu_xy = b.mul(&mu_x, &mu_y)?;
    let var_x = b.sub(&e_xx, &mu_xx)?;
    let var_y = b.sub(&e_yy, &mu_yy)?;
    let cov = b.sub(&e_xy, &mu_xy)?;

    let two_mu = b.scale(&mu_xy, 2.0);
    let l_num = b.offset(&two_mu, p.c1());
    let mu_sum = b.add(&mu_xx, &mu_yy)?;
    let l_den = b.offset(&mu_sum, p.c1());
    let l = b.div(&l_num, &l_den)?;

    let two_cov = b.scale(&cov, 2.0);
    let cs_num = b.offset(&two_cov, p.c2());
    let var_sum = b.add(&var_x, &var_y)?;
    let cs_den = b.offset(&var_sum, p.c2());
    let cs = b.div(&cs_num, &cs_den)?;
    Ok((l, cs))
}

/// Mean SSIM with its luminance and contrast-structure maps.
#[derive(Clone, Debug, PartialEq)]
pub struct Ssim<T> {
    pub value: f64,
    pub l: Tensor4<T>,
    pub cs: Tensor4<T>,
}

pub fn ssim<T: Real>(
    a: &Tensor4<T>,
    b: &Tensor4<T>,
    p: &SsimParams,
) -> Result<Ssim<T>, TensorError> {
    let mut e = Eager;
    let (l, cs) = ssim_maps_with(&mut e, a, b, p)?;
    let prod = l.zip_map(&cs, |u, v| u * v)?;
    Ok(Ssim {
        value: prod.mean().as_f64(),
        l,
        cs,
    })
}

static SCALE_WARNED: AtomicBool = AtomicBool::new(false);

/// `1 − Π_{j<M} cs_j^{β_j} · (l·cs)_M^{β_M}` with factor-2 averaging between
/// scales. The scale count shrinks for small images.
pub fn ms_ssim_loss_with<T: Real, B: Backend<T>>(
    b: &mut B,
    x: &B::V,
    y: &B::V,
    p: &SsimParams,
) -> Result<B::V, TensorError> {
    same_shape(b.value(x), b.value(y), "ms_ssim_loss")?;
    let [_, _, h, w] = b.value(x).shape();
    let m = p.scales_for(h, w);
    if m < p.scales && !SCALE_WARNED.swap(true, Ordering::Relaxed) {
        log::warn!(
            "{h}x{w} images support {m} of {} MS-SSIM scales; using {m}",
            p.scales
        );
    }
    let betas = p.betas_for(m);
    let (mut x, mut y) = (x.clone(), y.clone());
    let mut product: Option<B::V> = None;
    for (j, &beta) in betas.iter().enumerate() {
        let (l, cs) = ssim_maps_with(b, &x, &y, p)?;
        let term = if j + 1 == m {
            let lcs = b.mul(&l, &cs)?;
            b.mean_all(&lcs)
        } else {
            b.mean_all(&cs)
        };
        let term = b.unary(Unary::Clamp(SIMILARITY_FLOOR, f64::INFINITY), &term);
        let term = if beta == 1.0 {
            term
        } else {
            b.unary(Unary::Powf(beta), &term)
        };
        product = Some(match product {
            Some(acc) => b.mul(&acc, &term)?,
            None => term,
        });
        if j + 1 < m {
            x = b.avg_pool2(&x)?;
            y = b.avg_pool2(&y)?;
        }
    }
    let product = product.expect("at least one scale");
    let neg = b.scale(&product, -1.0);
    Ok(b.offset(&neg, 1.0))
}

/// Mean absolute difference.
pub fn l1_loss_with<T: Real, B: Backend<T>>(
    b: &mut B,
    x: &B::V,
    y: &B::V,
) -> Result<B::V, TensorError> {
    same_shape(b.value(x), b.value(y), "l1_loss")?;
    let d = b.sub(x, y)?;
    let a = b.unary(Unary::Abs, &d);
    Ok(b.mean_all(&a))
}

/// `√mean(Δ_h²) + √mean(Δ_w²)` over forward differences.
pub fn tv_loss_with<T: Real, B: Backend<T>>(b: &mut B, x: &B::V) -> Result<B::V, TensorError> {
    let [_, c, h, w] = b.value(x).shape();
    if h < 2 || w < 2 {
        return Err(TensorError::InvalidArgument(format!(
            "total variation needs at least 2x2 pixels, got {h}x{w}"
        )));
    }
    let minus_one = T::lit(-1.0);
    let dy = b.constant(Tensor4::from_fn([c, 1, 2, 1], |_, _, y, _| {
        if y == 0 {
            minus_one
        } else {
            T::one()
        }
    }));
    let dx = b.constant(Tensor4::from_fn([c, 1, 1, 2], |_, _, _, x| {
        if x == 0 {
            minus_one
        } else {
            T::one()
        }
    }));
    let norm = |b: &mut B, k: &B::V| -> Result<B::V, TensorError> {
        let d = b.depthwise_conv2d(x, k, None, 0)?;
        let sq = b.mul(&d, &d)?;
        let m = b.mean_all(&sq);
        Ok(b.unary(Unary::Sqrt, &m))
    };
    let gh = norm(b, &dy)?;
    let gw = norm(b, &dx)?;
    b.add(&gh, &gw)
}

/// Weighted hybrid loss; terms with zero weight are skipped.
pub fn total_loss_with<T: Real, B: Backend<T>>(
    b: &mut B,
    x: &B::V,
    y: &B::V,
    weights: &LossWeights,
    p: &SsimParams,
) -> Result<LossTerms<B::V>, TensorError> {
    let zero = || Tensor4::scalar(T::zero());
    let ms_ssim = if weights.ms_ssim != 0.0 {
        ms_ssim_loss_with(b, x, y, p)?
    } else {
        b.constant(zero())
    };
    let l1 = if weights.l1 != 0.0 {
        l1_loss_with(b, x, y)?
    } else {
        b.constant(zero())
    };
    let tv = if weights.tv != 0.0 {
        tv_loss_with(b, x)?
    } else {
        b.constant(zero())
    };
    let a = b.scale(&ms_ssim, weights.ms_ssim);
    let l = b.scale(&l1, weights.l1);
    let t = b.scale(&tv, weights.tv);
    let total = b.add(&a, &l)?;
    let total = b.add(&total, &t)?;
    Ok(LossTerms {
        ms_ssim,
        l1,
        tv,
        total,
    })
}

fn scalar<T: Real>(t: &Tensor4<T>) -> f64 {
    t.data()[0].as_f64()
}

pub fn ms_ssim_loss<T: Real>(
    x: &Tensor4<T>,
    y: &Tensor4<T>,
    p: &SsimParams,
) -> Result<f64, TensorError> {
    ms_ssim_loss_with(&mut Eager, x, y, p).map(|v| scalar(&v))
}

pub fn l1_loss<T: Real>(x: &Tensor4<T>, y: &Tensor4<T>) -> Result<f64, TensorError> {
    l1_loss_with(&mut Eager, x, y).map(|v| scalar(&v))
}

pub fn tv_loss<T: Real>(x: &Tensor4<T>) -> Result<f64, TensorError> {
    tv_loss_with(&mut Eager, x).map(|v| scalar(&v))
}

pub fn total_loss<T: Real>(
    x: &Tensor4<T>,
    y: &Tensor4<T>,
    weights: &LossWeights,
    p: &SsimParams,
) -> Result<LossTerms<f64>, TensorError> {
    let t = total_loss_with(&mut Eager, x, y, weights, p)?;
    Ok(LossTerms {
        ms_ssim: scalar(&t.ms_ssim),
        l1: scalar(&t.l1),
        tv: scalar(&t.tv),
        total: scalar(&t.total),
    })
}

/// Combines precomputed term values with the given weights.
pub fn weighted_total(weights: &LossWeights, ms_ssim: f64, l1: f64, tv: f64) -> f64 {
    weights.ms_ssim * ms_ssim + weights.l1 * l1 + weights.tv * tv
}

/// Peak signal-to-noise ratio in dB; identical inputs give `f64::INFINITY`.
pub fn psnr<T: Real>(a: &Tensor4<T>, b: &Tensor4<T>, peak: f64) -> Result<f64, TensorError> {
    same_shape(a, b, "psnr")?;
    let n = a.numel();
    if n == 0 {
        return Err(TensorError::EmptySpatial("psnr"));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2))
        .sum::<f64>()
        / n as f64;
    Ok(psnr_from_mse(mse, peak))
}

pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}
