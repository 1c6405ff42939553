//! Fixed directional edge-filter banks.
//!
//! The eight-direction Kirsch compass bank drives the edge branches of the
//! reparameterization block. Roberts, Prewitt, Sobel and Laplacian banks are
//! provided as drop-in substitutes for operator ablations.

use std::fmt;

use crate::error::TensorError;
use crate::tensor::{Real, Tensor4};

/// A 3×3 integer stencil, row-major.
pub type Stencil = [[i8; 3]; 3];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    NorthWest,
    North,
    NorthEast,
    East,
    SouthEast,
    South,
    SouthWest,
    West,
}

impl Direction {
    pub const ALL: [Direction; 8] = [
        Direction::NorthWest,
        Direction::North,
        Direction::NorthEast,
        Direction::East,
        Direction::SouthEast,
        Direction::South,
        Direction::SouthWest,
        Direction::West,
    ];

    pub fn arrow(self) -> &'static str {
        match self {
            Direction::NorthWest => "↖",
            Direction::North => "↑",
            Direction::NorthEast => "↗",
            Direction::East => "→",
            Direction::SouthEast => "↘",
            Direction::South => "↓",
            Direction::SouthWest => "↙",
            Direction::West => "←",
        }
    }
}

const KIRSCH: [Stencil; 8] = [
    [[5, 5, -3], [5, 0, -3], [-3, -3, -3]],
    [[5, 5, 5], [-3, 0, -3], [-3, -3, -3]],
    [[-3, 5, 5], [-3, 0, 5], [-3, -3, -3]],
    [[-3, -3, 5], [-3, 0, 5], [-3, -3, 5]],
    [[-3, -3, -3], [-3, 0, 5], [-3, 5, 5]],
    [[-3, -3, -3], [-3, 0, -3], [5, 5, 5]],
    [[-3, -3, -3], [5, 0, -3], [5, 5, -3]],
    [[5, -3, -3], [5, 0, -3], [5, -3, -3]],
];

/// The eight Kirsch compass kernels `K_1 … K_8`, ordered ↖ ↑ ↗ → ↘ ↓ ↙ ←.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KirschBank {
    kernels: [Stencil; 8],
}

impl Default for KirschBank {
    fn default() -> Self {
        kirsch_bank()
    }
}

pub fn kirsch_bank() -> KirschBank {
    KirschBank { kernels: KIRSCH }
}

impl KirschBank {
    /// Kernel for a 1-based direction index.
    pub fn kernel(&self, direction: usize) -> Result<&Stencil, TensorError> {
        if !(1..=8).contains(&direction) {
            return Err(TensorError::InvalidArgument(format!(
                "Kirsch direction must be in 1..=8, got {direction}"
            )));
        }
        Ok(&self.kernels[direction - 1])
    }

    pub fn kernels(&self) -> &[Stencil; 8] {
        &self.kernels
    }

    pub fn direction(&self, direction: usize) -> Option<Direction> {
        Direction::ALL.get(direction.wrapping_sub(1)).copied()
    }
}

/// Clockwise ring of the eight non-center cells, starting top-left.
pub const RING: [(usize, usize); 8] = [
    (0, 0),
    (0, 1),
    (0, 2),
    (1, 2),
    (2, 2),
    (2, 1),
    (2, 0),
    (1, 0),
];

/// Rotates the outer ring of a stencil one cell (45°) clockwise.
pub fn rotate45(k: &Stencil) -> Stencil {
    let mut out = *k;
    for j in 0..8 {
        let (ty, tx) = RING[(j + 1) % 8];
        let (sy, sx) = RING[j];
        out[ty][tx] = k[sy][sx];
    }
    out
}

/// Edge operator family used by the edge branches.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum EdgeOperator {
    #[default]
    Kirsch,
    Roberts,
    Prewitt,
    Sobel,
    Laplacian,
}

impl EdgeOperator {
    pub const ALL: [EdgeOperator; 5] = [
        EdgeOperator::Roberts,
        EdgeOperator::Prewitt,
        EdgeOperator::Sobel,
        EdgeOperator::Laplacian,
        EdgeOperator::Kirsch,
    ];

    /// The bank's stencils. Roberts' 2×2 kernels sit in the top-left corner
    /// of a zero 3×3 frame so every branch fuses into a 3×3 convolution.
    pub fn stencils(self) -> Vec<Stencil> {
        match self {
            EdgeOperator::Kirsch => KIRSCH.to_vec(),
            EdgeOperator::Roberts => vec![
                [[1, 0, 0], [0, -1, 0], [0, 0, 0]],
                [[0, 1, 0], [-1, 0, 0], [0, 0, 0]],
            ],
            EdgeOperator::Prewitt => vec![
                [[-1, 0, 1], [-1, 0, 1], [-1, 0, 1]],
                [[-1, -1, -1], [0, 0, 0], [1, 1, 1]],
            ],
            EdgeOperator::Sobel => vec![
                [[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]],
                [[-1, -2, -1], [0, 0, 0], [1, 2, 1]],
            ],
            EdgeOperator::Laplacian => vec![[[0, 1, 0], [1, -4, 1], [0, 1, 0]]],
        }
    }

    /// Stable one-byte identifier.
    pub fn code(self) -> u8 {
        match self {
            EdgeOperator::Kirsch => 0,
            EdgeOperator::Roberts => 1,
            EdgeOperator::Prewitt => 2,
            EdgeOperator::Sobel => 3,
            EdgeOperator::Laplacian => 4,
        }
    }

    pub fn from_code(v: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|op| op.code() == v)
    }

    pub fn branch_count(self) -> usize {
        self.stencils().len()
    }

    /// Recognizes a bank from its stencils (used when loading weights).
    pub fn from_stencils(stencils: &[Stencil]) -> Option<Self> {
        Self::ALL.into_iter().find(|op| op.stencils() == stencils)
    }

    pub fn name(self) -> &'static str {
        match self {
            EdgeOperator::Kirsch => "kirsch",
            EdgeOperator::Roberts => "roberts",
            EdgeOperator::Prewitt => "prewitt",
            EdgeOperator::Sobel => "sobel",
            EdgeOperator::Laplacian => "laplacian",
        }
    }
}

impl fmt::Display for EdgeOperator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for EdgeOperator {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|op| op.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown edge operator `{s}`"))
    }
}

/// A stencil as a `(1, 1, 3, 3)` real tensor.
pub fn stencil_tensor<T: Real>(k: &Stencil) -> Tensor4<T> {
    Tensor4::from_fn([1, 1, 3, 3], |_, _, y, x| T::lit(k[y][x] as f64))
}

/// Applies the kernel of `direction` (1..=8) to every channel with zero
/// padding of one pixel.
///
/// Evaluated as `Σ K_p · (x_p − x_center)`, which equals the plain
/// correlation for zero-sum stencils and is exactly zero on flat regions.
pub fn kirsch_respond<T: Real>(
    input: &Tensor4<T>,
    bank: &KirschBank,
    direction: usize,
) -> Result<Tensor4<T>, TensorError> {
    let k = bank.kernel(direction)?;
    let [n, c, h, w] = input.shape();
    if input.numel() == 0 {
        return Err(TensorError::EmptySpatial("kirsch_respond"));
    }
    let taps: Vec<(isize, isize, T)> = RING
        .iter()
        .map(|&(ky, kx)| (ky as isize - 1, kx as isize - 1, T::lit(k[ky][kx] as f64)))
        .collect();
    let at = |b: usize, ch: usize, y: isize, x: isize| {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            T::zero()
        } else {
            input.get(b, ch, y as usize, x as usize)
        }
    };
    Ok(Tensor4::from_fn([n, c, h, w], |b, ch, y, x| {
        let center = input.get(b, ch, y, x);
        let (y, x) = (y as isize, x as isize);
        taps.iter().fold(T::zero(), |acc, &(dy, dx, kv)| {
            acc + kv * (at(b, ch, y + dy, x + dx) - center)
        })
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Tensor4<f64> {
        Tensor4::from_fn([1, 1, h, w], |_, _, _, x| x as f64)
    }

    #[test]
    fn table_entries() {
        let b = kirsch_bank();
        assert_eq!(b.kernel(1).unwrap()[0], [5, 5, -3]);
        assert_eq!(
            *b.kernel(4).unwrap(),
            [[-3, -3, 5], [-3, 0, 5], [-3, -3, 5]]
        );
        assert_eq!(b.direction(4), Some(Direction::East));
        assert!(b.kernel(0).is_err() && b.kernel(9).is_err());
    }

    #[test]
    fn structural_invariants() {
        let b = kirsch_bank();
        for (i, k) in b.kernels().iter().enumerate() {
            let flat: Vec<i8> = k.iter().flatten().copied().collect();
            assert_eq!(flat.iter().map(|&v| v as i32).sum::<i32>(), 0);
            assert_eq!(flat.iter().filter(|&&v| v == 5).count(), 3);
            assert_eq!(flat.iter().filter(|&&v| v == -3).count(), 5);
            assert_eq!(k[1][1], 0);
            assert_eq!(rotate45(k), b.kernels()[(i + 1) % 8]);
        }
    }

    #[test]
    fn all_banks_reject_constants() {
        for op in EdgeOperator::ALL {
            for k in op.stencils() {
                assert_eq!(
                    k.iter().flatten().map(|&v| v as i32).sum::<i32>(),
                    0,
                    "{op}"
                );
            }
            assert_eq!(EdgeOperator::from_stencils(&op.stencils()), Some(op));
        }
    }

    #[test]
    fn constant_image_gives_zero_interior() {
        let x = Tensor4::full([1, 2, 6, 6], 0.37);
        let b = kirsch_bank();
        for d in 1..=8 {
            let r = kirsch_respond(&x, &b, d).unwrap().crop_center(1).unwrap();
            assert!(r.data().iter().all(|&v| v == 0.0), "direction {d}");
        }
    }

    #[test]
    fn ramp_east_and_west() {
        let b = kirsch_bank();
        let x = ramp(6, 7);
        let east = kirsch_respond(&x, &b, 4).unwrap().crop_center(1).unwrap();
        let west = kirsch_respond(&x, &b, 8).unwrap().crop_center(1).unwrap();
        assert!(east.data().iter().all(|&v| v == 24.0));
        assert!(west.data().iter().all(|&v| v == -24.0));
    }

    #[test]
    fn matches_plain_correlation() {
        let x = crate::testutil::random_tensor([2, 3, 5, 6], 8);
        let b = kirsch_bank();
        for d in 1..=8 {
            let w = Tensor4::from_fn([3, 1, 3, 3], |_, _, y, xx| {
                b.kernel(d).unwrap()[y][xx] as f64
            });
            let plain = crate::ops::conv::depthwise_conv2d_raw(&x, &w, None, 1).unwrap();
            let r = kirsch_respond(&x, &b, d).unwrap();
            assert!(r.max_abs_diff(&plain).unwrap() < 1e-12);
        }
    }

    #[test]
    fn rotation_equivariance() {
        // Rotating the image 90° clockwise maps direction d onto d + 2.
        let x = crate::testutil::random_tensor([1, 1, 7, 7], 5);
        let rot = Tensor4::from_fn([1, 1, 7, 7], |_, _, y, xx| x.get(0, 0, 6 - xx, y));
        let b = kirsch_bank();
        for d in 1..=8 {
            let r0 = kirsch_respond(&x, &b, d).unwrap();
            let d2 = (d + 1) % 8 + 1;
            let r1 = kirsch_respond(&rot, &b, d2).unwrap();
            for y in 1..6 {
                for xx in 1..6 {
                    let a = r1.get(0, 0, y, xx);
                    let e = r0.get(0, 0, 6 - xx, y);
                    assert!((a - e).abs() < 1e-12, "d={d}");
                }
            }
        }
    }

    #[test]
    fn opposite_directions_negate_on_ramps() {
        let b = kirsch_bank();
        let diag = Tensor4::from_fn([1, 1, 6, 6], |_, _, y, x| (2 * x) as f64 - y as f64);
        for d in 1..=4 {
            let a = kirsch_respond(&diag, &b, d)
                .unwrap()
                .crop_center(1)
                .unwrap();
            let o = kirsch_respond(&diag, &b, d + 4)
                .unwrap()
                .crop_center(1)
                .unwrap();
            for (p, q) in a.data().iter().zip(o.data()) {
                assert!((p + q).abs() < 1e-12);
            }
        }
    }
}
