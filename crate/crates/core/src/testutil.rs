//! Independent reference implementations used by unit tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor4;

pub fn random_tensor(shape: [usize; 4], seed: u64) -> Tensor4<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor4::from_fn(shape, |_, _, _, _| rng.random_range(-1.0..1.0))
}

pub fn random_unit(shape: [usize; 4], seed: u64) -> Tensor4<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor4::from_fn(shape, |_, _, _, _| rng.random_range(0.0..1.0))
}

/// Six-nested-loop cross-correlation with an explicit border value per channel.
pub fn nested_conv(
    x: &Tensor4<f64>,
    w: &Tensor4<f64>,
    bias: Option<&[f64]>,
    margin: usize,
    border: Option<&[f64]>,
) -> Tensor4<f64> {
    let [n, c, h, wd] = x.shape();
    let [o, _, kh, kw] = w.shape();
    let oh = h + 2 * margin - kh + 1;
    let ow = wd + 2 * margin - kw + 1;
    Tensor4::from_fn([n, o, oh, ow], |b, oc, oy, ox| {
        let mut acc = bias.map_or(0.0, |bv| bv[oc]);
        for ic in 0..c {
            for ky in 0..kh {
                for kx in 0..kw {
                    let iy = oy as isize + ky as isize - margin as isize;
                    let ix = ox as isize + kx as isize - margin as isize;
                    let v = if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                        border.map_or(0.0, |bv| bv[ic])
                    } else {
                        x.get(b, ic, iy as usize, ix as usize)
                    };
                    acc += w.get(oc, ic, ky, kx) * v;
                }
            }
        }
        acc
    })
}
