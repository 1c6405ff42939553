mod common;

use common::{
    krm_branches, krm_oracle, nested_conv, nested_depthwise, random_krm, random_tensor,
    KIRSCH_TABLE,
};
use eranet::kirsch::EdgeOperator;
use eranet::ops::{Conv, ConvKernel};
use eranet::reparam::{
    fuse_expand_squeeze, fuse_kirsch_branch, fuse_krm, fused_param_count, krm_forward_fused,
    krm_forward_training, krm_param_count, KrmWeights,
};
use eranet::{Eager, Tensor4};
use proptest::prelude::*;

fn conv(weight: Tensor4<f64>, bias: Tensor4<f64>) -> ConvKernel<f64> {
    Conv {
        weight,
        bias: Some(bias),
    }
}

fn scaled(k: &ConvKernel<f64>, s: f64) -> ConvKernel<f64> {
    k.map(&mut |t: &Tensor4<f64>| t.map(|v| v * s))
}

#[test]
fn training_form_is_sum_of_ten_branches() {
    let w = random_krm(4, 11);
    let x = random_tensor([1, 4, 8, 8], 12);
    let branches = krm_branches(&x, &w);
    assert_eq!(branches.len(), 10);
    let got = krm_forward_training(&mut Eager, &x, &w).unwrap();
    assert!(got.max_abs_diff(&krm_oracle(&x, &w)).unwrap() <= 1e-12);
}

#[test]
fn expand_squeeze_matches_sequential_forward() {
    let expand = conv(
        random_tensor([4, 2, 1, 1], 21),
        random_tensor([1, 4, 1, 1], 22),
    );
    let squeeze = conv(
        random_tensor([2, 4, 3, 3], 23),
        random_tensor([1, 2, 1, 1], 24),
    );
    let fused = fuse_expand_squeeze(&expand, &squeeze).unwrap();
    let x = random_tensor([2, 2, 7, 5], 25);
    let eb = expand.bias.as_ref().unwrap().data().to_vec();
    let hidden = nested_conv(&x, &expand.weight, Some(&eb), 0, None);
    let seq = nested_conv(
        &hidden,
        &squeeze.weight,
        Some(squeeze.bias.as_ref().unwrap().data()),
        1,
        Some(&eb),
    );
    let one = nested_conv(
        &x,
        &fused.weight,
        Some(fused.bias.as_ref().unwrap().data()),
        1,
        None,
    );
    assert!(seq.max_abs_diff(&one).unwrap() <= 1e-12);
}

#[test]
fn expand_squeeze_identity_and_zero_cases() {
    let mut id = ConvKernel::<f64>::zeros(3, 3, 1, true);
    for c in 0..3 {
        id.weight.set(c, c, 0, 0, 1.0);
    }
    let squeeze = conv(
        random_tensor([3, 3, 3, 3], 31),
        random_tensor([1, 3, 1, 1], 32),
    );
    let f = fuse_expand_squeeze(&id, &squeeze).unwrap();
    assert_eq!(f.weight, squeeze.weight);
    assert_eq!(f.bias, squeeze.bias);

    let expand = conv(
        random_tensor([3, 3, 1, 1], 33),
        random_tensor([1, 3, 1, 1], 34),
    );
    let zero_s = conv(
        Tensor4::zeros([3, 3, 3, 3]),
        random_tensor([1, 3, 1, 1], 35),
    );
    let f = fuse_expand_squeeze(&expand, &zero_s).unwrap();
    assert!(f.weight.data().iter().all(|&v| v == 0.0));
    assert_eq!(f.bias, zero_s.bias);
}

#[test]
fn expand_squeeze_is_bilinear() {
    let expand = conv(
        random_tensor([6, 3, 1, 1], 41),
        Tensor4::zeros([1, 6, 1, 1]),
    );
    let squeeze = conv(
        random_tensor([3, 6, 3, 3], 42),
        Tensor4::zeros([1, 3, 1, 1]),
    );
    let base = fuse_expand_squeeze(&expand, &squeeze).unwrap();
    for s in [-2.0, 0.5, 3.0] {
        let a = fuse_expand_squeeze(&scaled(&expand, s), &squeeze).unwrap();
        let b = fuse_expand_squeeze(&expand, &scaled(&squeeze, s)).unwrap();
        let want = base.weight.map(|v| v * s);
        assert!(a.weight.max_abs_diff(&want).unwrap() <= 1e-12);
        assert!(b.weight.max_abs_diff(&want).unwrap() <= 1e-12);
    }
}

#[test]
fn kirsch_branch_matches_sequential_forward() {
    let c = 3;
    let pre = conv(
        random_tensor([c, c, 1, 1], 51),
        random_tensor([1, c, 1, 1], 52),
    );
    let scale = random_tensor([c, 1, 1, 1], 53);
    let bias = random_tensor([1, c, 1, 1], 54);
    for stencil in &KIRSCH_TABLE {
        let fused = fuse_kirsch_branch(&pre, scale.data(), stencil, bias.data()).unwrap();
        let x = random_tensor([2, c, 6, 9], 55);
        let pb = pre.bias.as_ref().unwrap().data().to_vec();
        let mixed = nested_conv(&x, &pre.weight, Some(&pb), 0, None);
        let kernel = Tensor4::from_fn([c, 1, 3, 3], |ch, _, y, x| {
            scale.data()[ch] * stencil[y][x] as f64
        });
        let seq = nested_depthwise(&mixed, &kernel, Some(bias.data()), 1, Some(&pb));
        let one = nested_conv(
            &x,
            &fused.weight,
            Some(fused.bias.as_ref().unwrap().data()),
            1,
            None,
        );
        assert!(seq.max_abs_diff(&one).unwrap() <= 1e-12);
    }
}

#[test]
fn kirsch_branch_degenerate_cases() {
    let c = 2;
    let pre = conv(
        random_tensor([c, c, 1, 1], 61),
        random_tensor([1, c, 1, 1], 62),
    );
    let bias = random_tensor([1, c, 1, 1], 63);
    let f = fuse_kirsch_branch(&pre, &[0.0; 2], &KIRSCH_TABLE[0], bias.data()).unwrap();
    assert!(f.weight.data().iter().all(|&v| v == 0.0));
    assert_eq!(f.bias.as_ref().unwrap().data(), bias.data());

    let mut id = ConvKernel::<f64>::zeros(c, c, 1, true);
    for ch in 0..c {
        id.weight.set(ch, ch, 0, 0, 1.0);
    }
    let f = fuse_kirsch_branch(&id, &[1.0; 2], &KIRSCH_TABLE[3], &[0.0; 2]).unwrap();
    for o in 0..c {
        for i in 0..c {
            for y in 0..3 {
                for x in 0..3 {
                    let want = if o == i {
                        KIRSCH_TABLE[3][y][x] as f64
                    } else {
                        0.0
                    };
                    assert_eq!(f.weight.get(o, i, y, x), want);
                }
            }
        }
    }
}

#[test]
fn zero_and_normal_only_blocks() {
    let z = KrmWeights::<f64>::zeros(4, 2, EdgeOperator::Kirsch);
    let f = fuse_krm(&z).unwrap();
    assert!(f
        .kernel
        .weight
        .data()
        .iter()
        .chain(f.kernel.bias.as_ref().unwrap().data())
        .all(|&v| v == 0.0));

    let mut n = z.clone();
    n.normal = conv(
        random_tensor([4, 4, 3, 3], 71),
        random_tensor([1, 4, 1, 1], 72),
    );
    let f = fuse_krm(&n).unwrap();
    assert_eq!(f.kernel.weight, n.normal.weight);
    assert_eq!(f.kernel.bias, n.normal.bias);
}

#[test]
fn fused_count_is_smaller_for_every_width() {
    for c in 1..=64 {
        let training = krm_param_count(c, 2, 8);
        assert!(fused_param_count(c) < training, "C = {c}");
    }
    assert_eq!(
        KrmWeights::<f64>::zeros(32, 2, EdgeOperator::Kirsch).param_count(),
        krm_param_count(32, 2, 8)
    );
}

#[test]
fn alternative_banks_fuse_exactly() {
    for op in [
        EdgeOperator::Roberts,
        EdgeOperator::Prewitt,
        EdgeOperator::Sobel,
        EdgeOperator::Laplacian,
    ] {
        let z = KrmWeights::<f64>::zeros(3, 2, op);
        let mut k = 0u64;
        let w = z.map(&mut |p: &Tensor4<f64>| {
            k += 1;
            random_tensor(p.shape(), 800 + k)
        });
        let x = random_tensor([1, 3, 10, 7], 899);
        let a = krm_forward_training(&mut Eager, &x, &w).unwrap();
        let b = krm_forward_fused(&x, &fuse_krm(&w).unwrap()).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() <= 1e-10, "{op:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn fusion_equivalence_everywhere(
        ci in 0usize..4,
        n in 1usize..=2,
        h in 1usize..=12,
        w in 1usize..=12,
        seed in any::<u64>(),
    ) {
        let c = [1, 2, 4, 8][ci];
        let wts = random_krm(c, seed);
        let x = random_tensor([n, c, h, w], seed ^ 0x9e37);
        let fused = fuse_krm(&wts).unwrap();
        let a = krm_forward_training(&mut Eager, &x, &wts).unwrap();
        let b = krm_forward_fused(&x, &fused).unwrap();
        prop_assert!(a.max_abs_diff(&b).unwrap() <= 1e-10);

        let w32 = wts.map(&mut |t: &Tensor4<f64>| t.cast::<f32>());
        let x32 = x.cast::<f32>();
        let a32 = krm_forward_training(&mut Eager, &x32, &w32).unwrap();
        let b32 = krm_forward_fused(&x32, &fuse_krm(&w32).unwrap()).unwrap();
        prop_assert!(a32.max_abs_diff(&b32).unwrap() <= 1e-4);
    }
}
