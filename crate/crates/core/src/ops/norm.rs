//! Layer normalization with per-channel affine parameters.

use crate::error::TensorError;
use crate::tensor::{Real, Tensor4};

/// Statistics grouping for [`layer_norm`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum NormGroup {
    /// Mean/variance over the spatial extent of each (sample, channel).
    #[default]
    PerChannel,
    /// Mean/variance over all of (channel, height, width) for each sample.
    PerSample,
}

impl NormGroup {
    pub fn code(self) -> u8 {
        match self {
            NormGroup::PerChannel => 0,
            NormGroup::PerSample => 1,
        }
    }

    pub fn from_code(v: u8) -> Option<Self> {
        match v {
            0 => Some(NormGroup::PerChannel),
            1 => Some(NormGroup::PerSample),
            _ => None,
        }
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Output together with the normalized input and per-group reciprocal std.
pub struct Normalized<T> {
    pub value: Tensor4<T>,
    pub xhat: Tensor4<T>,
    pub rstd: Vec<T>,
}

fn groups(shape: [usize; 4], group: NormGroup) -> (usize, usize) {
    let [n, c, h, w] = shape;
    match group {
        NormGroup::PerChannel => (n * c, h * w),
        NormGroup::PerSample => (n, c * h * w),
    }
}

fn check_affine<T>(input: &Tensor4<T>, gain: &[T], shift: &[T]) -> Result<(), TensorError> {
    for (what, v) in [("layer_norm gain", gain), ("layer_norm shift", shift)] {
        if v.len() != input.c() {
            return Err(TensorError::LengthMismatch {
                what,
                expected: input.c(),
                got: v.len(),
            });
        }
    }
    Ok(())
}

/// `gain[c]·(x − mean)/sqrt(var + eps) + shift[c]`, statistics per `group`.
pub fn layer_norm<T: Real>(
    input: &Tensor4<T>,
    gain: &[T],
    shift: &[T],
    eps: T,
    group: NormGroup,
) -> Result<Normalized<T>, TensorError> {
    check_affine(input, gain, shift)?;
    if eps <= T::zero() {
        return Err(TensorError::InvalidArgument(
            "layer_norm epsilon must be > 0".into(),
        ));
    }
    let (count, size) = groups(input.shape(), group);
    if size == 0 {
        return Err(TensorError::EmptySpatial("layer_norm"));
    }
    let inv = T::one() / T::from_usize(size).unwrap();
    let mut xhat = input.clone();
    let mut rstd = Vec::with_capacity(count);
    for g in 0..count {
        let chunk = &mut xhat.data_mut()[g * size..(g + 1) * size];
        let mean = chunk.iter().copied().sum::<T>() * inv;
        let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv;
        let r = T::one() / (var + eps).sqrt();
        chunk.iter_mut().for_each(|v| *v = (*v - mean) * r);
        rstd.push(r);
    }
    let [n, c, _, _] = input.shape();
    let mut value = xhat.clone();
    for b in 0..n {
        for ch in 0..c {
            for v in value.plane_mut(b, ch) {
                *v = gain[ch] * *v + shift[ch];
            }
        }
    }
    Ok(Normalized { value, xhat, rstd })
}

/// Gradients with respect to input, gain and shift.
pub fn layer_norm_backward<T: Real>(
    grad: &Tensor4<T>,
    xhat: &Tensor4<T>,
    rstd: &[T],
    gain: &[T],
    group: NormGroup,
) -> (Tensor4<T>, Vec<T>, Vec<T>) {
    let [n, c, _, _] = grad.shape();
    let mut dgain = vec![T::zero(); c];
    let mut dshift = vec![T::zero(); c];
    // dxhat = grad · gain[c]
    let mut dxhat = grad.clone();
    for b in 0..n {
        for ch in 0..c {
            let gp = grad.plane(b, ch);
            let xp = xhat.plane(b, ch);
            for (g, x) in gp.iter().zip(xp) {
                dgain[ch] = dgain[ch] + *g * *x;
                dshift[ch] = dshift[ch] + *g;
            }
            dxhat
                .plane_mut(b, ch)
                .iter_mut()
                .for_each(|v| *v = *v * gain[ch]);
        }
    }
    let (count, size) = groups(grad.shape(), group);
    let nf = T::from_usize(size).unwrap();
    let mut dx = dxhat.clone();
    for (g, &r) in rstd.iter().enumerate().take(count) {
        let d = &dxhat.data()[g * size..(g + 1) * size];
        let xh = &xhat.data()[g * size..(g + 1) * size];
        let sum_d = d.iter().copied().sum::<T>();
        let sum_dx = d.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>();
        let out = &mut dx.data_mut()[g * size..(g + 1) * size];
        for i in 0..size {
            out[i] = r / nf * (nf * d[i] - sum_d - xh[i] * sum_dx);
        }
    }
    (dx, dgain, dshift)
}
