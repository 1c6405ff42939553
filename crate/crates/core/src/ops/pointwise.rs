//! Activations.

use crate::error::TensorError;
use crate::tensor::{Real, Tensor4};

/// Overflow-free logistic function.
pub fn sigmoid_scalar<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Real>(input: &Tensor4<T>) -> Tensor4<T> {
    input.map(sigmoid_scalar)
}

pub fn relu<T: Real>(input: &Tensor4<T>) -> Tensor4<T> {
    input.map(|v| v.max(T::zero()))
}

fn check_slopes<T>(input: &Tensor4<T>, slopes: &[T]) -> Result<(), TensorError> {
    if slopes.len() != input.c() {
        return Err(TensorError::LengthMismatch {
            what: "prelu slopes",
            expected: input.c(),
            got: slopes.len(),
        });
    }
    Ok(())
}

/// `x` where `x ≥ 0`, `slope[c]·x` elsewhere.
pub fn prelu<T: Real>(input: &Tensor4<T>, slopes: &[T]) -> Result<Tensor4<T>, TensorError> {
    check_slopes(input, slopes)?;
    let mut out = input.clone();
    let [n, c, _, _] = input.shape();
    for b in 0..n {
        for (ch, &s) in slopes.iter().enumerate().take(c) {
            for v in out.plane_mut(b, ch) {
                if *v < T::zero() {
                    *v = s * *v;
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of [`prelu`] with respect to the input and the slopes.
pub fn prelu_backward<T: Real>(
    input: &Tensor4<T>,
    slopes: &[T],
    grad: &Tensor4<T>,
) -> Result<(Tensor4<T>, Vec<T>), TensorError> {
    check_slopes(input, slopes)?;
    let [n, c, _, _] = input.shape();
    let mut dx = grad.clone();
    let mut ds = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let xs = input.plane(b, ch);
            for (i, d) in dx.plane_mut(b, ch).iter_mut().enumerate() {
                if xs[i] < T::zero() {
                    ds[ch] = ds[ch] + *d * xs[i];
                    *d = *d * slopes[ch];
                }
            }
        }
    }
    Ok((dx, ds))
}
