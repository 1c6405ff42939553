//! Independent reference implementations shared by the integration tests.
//! Nothing here calls into the library's numerical kernels.
#![allow(dead_code)]

use eranet::kirsch::Stencil;
use eranet::reparam::KrmWeights;
use eranet::Tensor4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Kirsch compass kernels typed in by hand, NW first, clockwise.
pub const KIRSCH_TABLE: [[[i8; 3]; 3]; 8] = [
    [[5, 5, -3], [5, 0, -3], [-3, -3, -3]],
    [[5, 5, 5], [-3, 0, -3], [-3, -3, -3]],
    [[-3, 5, 5], [-3, 0, 5], [-3, -3, -3]],
    [[-3, -3, 5], [-3, 0, 5], [-3, -3, 5]],
    [[-3, -3, -3], [-3, 0, 5], [-3, 5, 5]],
    [[-3, -3, -3], [-3, 0, -3], [5, 5, 5]],
    [[-3, -3, -3], [5, 0, -3], [5, 5, -3]],
    [[5, -3, -3], [5, 0, -3], [5, -3, -3]],
];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: [usize; 4], seed: u64) -> Tensor4<f64> {
    let mut r = rng(seed);
    Tensor4::from_fn(shape, |_, _, _, _| r.random_range(-1.0..1.0))
}

pub fn random_unit(shape: [usize; 4], seed: u64) -> Tensor4<f64> {
    let mut r = rng(seed);
    Tensor4::from_fn(shape, |_, _, _, _| r.random_range(0.0..1.0))
}

/// Every parameter (including biases and edge scales) drawn from U(-1, 1).
pub fn random_krm(c: usize, seed: u64) -> KrmWeights<f64> {
    let mut r = rng(seed);
    let zeros = KrmWeights::<f64>::zeros(c, 2, eranet::kirsch::EdgeOperator::Kirsch);
    zeros.map(&mut |p: &Tensor4<f64>| {
        Tensor4::from_fn(p.shape(), |_, _, _, _| r.random_range(-1.0..1.0))
    })
}

/// Direct cross-correlation; out-of-range taps read `border[channel]`.
pub fn nested_conv(
    x: &Tensor4<f64>,
    w: &Tensor4<f64>,
    bias: Option<&[f64]>,
    margin: usize,
    border: Option<&[f64]>,
) -> Tensor4<f64> {
    let [n, c, h, wd] = x.shape();
    let [o, _, kh, kw] = w.shape();
    let oh = h + 2 * margin + 1 - kh;
    let ow = wd + 2 * margin + 1 - kw;
    Tensor4::from_fn([n, o, oh, ow], |b, oc, oy, ox| {
        let mut acc = bias.map_or(0.0, |bv| bv[oc]);
        for ic in 0..c {
            for ky in 0..kh {
                for kx in 0..kw {
                    let iy = (oy + ky) as isize - margin as isize;
                    let ix = (ox + kx) as isize - margin as isize;
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

/// Per-channel correlation with a `(c, 1, kh, kw)` kernel.
pub fn nested_depthwise(
    x: &Tensor4<f64>,
    w: &Tensor4<f64>,
    bias: Option<&[f64]>,
    margin: usize,
    border: Option<&[f64]>,
) -> Tensor4<f64> {
    let [n, c, h, wd] = x.shape();
    let [_, _, kh, kw] = w.shape();
    let oh = h + 2 * margin + 1 - kh;
    let ow = wd + 2 * margin + 1 - kw;
    Tensor4::from_fn([n, c, oh, ow], |b, ch, oy, ox| {
        let mut acc = bias.map_or(0.0, |bv| bv[ch]);
        for ky in 0..kh {
            for kx in 0..kw {
                let iy = (oy + ky) as isize - margin as isize;
                let ix = (ox + kx) as isize - margin as isize;
                let v = if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                    border.map_or(0.0, |bv| bv[ch])
                } else {
                    x.get(b, ch, iy as usize, ix as usize)
                };
                acc += w.get(ch, 0, ky, kx) * v;
            }
        }
        acc
    })
}

fn add(a: &Tensor4<f64>, b: &Tensor4<f64>) -> Tensor4<f64> {
    Tensor4::from_fn(a.shape(), |n, c, y, x| {
        a.get(n, c, y, x) + b.get(n, c, y, x)
    })
}

/// Training-form block evaluated branch by branch. Intermediate features of
/// the two-stage branches are bordered by their own bias.
pub fn krm_branches(x: &Tensor4<f64>, w: &KrmWeights<f64>) -> Vec<Tensor4<f64>> {
    let bias = |b: &Option<Tensor4<f64>>| b.as_ref().map(|t| t.data().to_vec());
    let mut out = Vec::new();
    let nb = bias(&w.normal.bias);
    out.push(nested_conv(x, &w.normal.weight, nb.as_deref(), 1, None));

    let eb = bias(&w.expand.bias);
    let sb = bias(&w.squeeze.bias);
    let hidden = nested_conv(x, &w.expand.weight, eb.as_deref(), 0, None);
    out.push(nested_conv(
        &hidden,
        &w.squeeze.weight,
        sb.as_deref(),
        1,
        eb.as_deref(),
    ));

    for (branch, stencil) in w.edges.iter().zip(KIRSCH_TABLE.iter()) {
        let pb = bias(&branch.pre.bias);
        let mixed = nested_conv(x, &branch.pre.weight, pb.as_deref(), 0, None);
        let c = mixed.c();
        let kernel = Tensor4::from_fn([c, 1, 3, 3], |ch, _, ky, kx| {
            branch.scale.data()[ch] * stencil[ky][kx] as f64
        });
        out.push(nested_depthwise(
            &mixed,
            &kernel,
            Some(branch.bias.data()),
            1,
            pb.as_deref(),
        ));
    }
    out
}

pub fn krm_oracle(x: &Tensor4<f64>, w: &KrmWeights<f64>) -> Tensor4<f64> {
    let branches = krm_branches(x, w);
    let mut acc = branches[0].clone();
    for b in &branches[1..] {
        acc = add(&acc, b);
    }
    acc
}

pub fn stencil_eq(a: &Stencil, b: &[[i8; 3]; 3]) -> bool {
    a == b
}

/// Response of one 3×3 integer stencil at interior pixel `(y, x)` of a plane.
pub fn stencil_at(plane: &[f64], w: usize, k: &[[i8; 3]; 3], y: usize, x: usize) -> f64 {
    let mut acc = 0.0;
    for ky in 0..3 {
        for kx in 0..3 {
            acc += k[ky][kx] as f64 * plane[(y + ky - 1) * w + (x + kx - 1)];
        }
    }
    acc
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<Vec<f64>> {
    let r = (size as f64 - 1.0) / 2.0;
    let mut win = vec![vec![0.0; size]; size];
    let mut total = 0.0;
    for (y, row) in win.iter_mut().enumerate() {
        for (x, v) in row.iter_mut().enumerate() {
            let d2 = (y as f64 - r).powi(2) + (x as f64 - r).powi(2);
            *v = (-d2 / (2.0 * sigma * sigma)).exp();
            total += *v;
        }
    }
    for row in win.iter_mut() {
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    win
}

/// Means over every valid window position of the luminance term and the
/// contrast-structure term, plus the mean of their product.
pub fn ssim_terms(a: &Tensor4<f64>, b: &Tensor4<f64>) -> (f64, f64, f64) {
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let [n, c, h, w] = a.shape();
    let fit = h.min(w);
    let size = if fit >= 11 {
        11
    } else if fit % 2 == 1 {
        fit
    } else {
        fit - 1
    };
    let win = gaussian_window(size, 1.5);
    let (mut sl, mut scs, mut sp, mut count) = (0.0, 0.0, 0.0, 0.0);
    for bn in 0..n {
        for ch in 0..c {
            for oy in 0..=h - size {
                for ox in 0..=w - size {
                    let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for (ky, row) in win.iter().enumerate() {
                        for (kx, g) in row.iter().enumerate() {
                            let p = a.get(bn, ch, oy + ky, ox + kx);
                            let q = b.get(bn, ch, oy + ky, ox + kx);
                            mx += g * p;
                            my += g * q;
                            xx += g * p * p;
                            yy += g * q * q;
                            xy += g * p * q;
                        }
                    }
                    let vx = xx - mx * mx;
                    let vy = yy - my * my;
                    let cov = xy - mx * my;
                    let l = (2.0 * mx * my + c1) / (mx * mx + my * my + c1);
                    let cs = (2.0 * cov + c2) / (vx + vy + c2);
                    sl += l;
                    scs += cs;
                    sp += l * cs;
                    count += 1.0;
                }
            }
        }
    }
    (sl / count, scs / count, sp / count)
}

fn halve(t: &Tensor4<f64>) -> Tensor4<f64> {
    let [n, c, h, w] = t.shape();
    Tensor4::from_fn([n, c, h / 2, w / 2], |b, ch, y, x| {
        let mut s = 0.0;
        for dy in 0..2 {
            for dx in 0..2 {
                s += t.get(b, ch, 2 * y + dy, 2 * x + dx);
            }
        }
        s / 4.0
    })
}

/// Straightforward multi-scale loss: `M = min(5, ⌊log2(min(h,w)/11)⌋ + 1)`,
/// exponents renormalized over the scales used, contrast-structure at every
/// scale and luminance only at the coarsest.
pub fn ms_ssim_loss_oracle(a: &Tensor4<f64>, b: &Tensor4<f64>) -> f64 {
    const BETAS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
    let side = a.h().min(a.w()) as f64;
    let m = ((side / 11.0).log2().floor() as i64 + 1).clamp(1, 5) as usize;
    let total: f64 = BETAS[..m].iter().sum();
    let (mut x, mut y) = (a.clone(), b.clone());
    let mut product = 1.0;
    for j in 0..m {
        let (_, cs, lcs) = ssim_terms(&x, &y);
        let term = if j + 1 == m { lcs } else { cs };
        product *= term.max(1e-6).powf(BETAS[j] / total);
        x = halve(&x);
        y = halve(&y);
    }
    1.0 - product
}
