#![allow(clippy::needless_range_loop)]

use coinnet::checks;
use coinnet::layers::{
    l2_normalize, relu, softmax_cross_entropy, softmax_cross_entropy_backward, spatial_average_pool, AttentionPool,
    Conv3x3, FeatureMap, Linear, ResidualBlock, ResidualGroup,
};
use coinnet::rng;
use proptest::prelude::*;

fn random_vec(r: &mut rng::Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| 2.0 * rng::unit_f64(r) - 1.0).collect()
}

fn random_map(r: &mut rng::Rng, h: usize, w: usize, c: usize) -> FeatureMap {
    FeatureMap::new(h, w, c, random_vec(r, h * w * c)).unwrap()
}

fn random_conv(r: &mut rng::Rng, ci: usize, co: usize) -> Conv3x3 {
    Conv3x3::new(ci, co, random_vec(r, co * ci * 9), random_vec(r, co)).unwrap()
}

/// Sliding window with explicit bounds checks; weight layout [o][c][kh][kw].
fn naive_conv(x: &FeatureMap, conv: &Conv3x3) -> FeatureMap {
    let (h, w, ci) = x.shape();
    FeatureMap::from_fn(h, w, conv.out_channels, |i, j, o| {
        let mut acc = conv.bias[o];
        for c in 0..ci {
            for kh in 0..3 {
                for kw in 0..3 {
                    let (y, z) = (i as isize + kh as isize - 1, j as isize + kw as isize - 1);
                    if y >= 0 && z >= 0 && (y as usize) < h && (z as usize) < w {
                        acc += conv.weight[((o * ci + c) * 3 + kh) * 3 + kw] * x.get(y as usize, z as usize, c);
                    }
                }
            }
        }
        acc
    })
}

fn naive_block(x: &FeatureMap, b: &ResidualBlock) -> FeatureMap {
    let inner = naive_conv(&relu(&naive_conv(x, &b.conv1)), &b.conv2);
    let (h, w, c) = x.shape();
    FeatureMap::from_fn(h, w, c, |i, j, k| (x.get(i, j, k) + inner.get(i, j, k)).max(0.0))
}

fn max_diff(a: &FeatureMap, b: &FeatureMap) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn conv_matches_naive_oracle() {
    let mut r = rng::seeded(1);
    for h in 1..=8 {
        for (w, ci, co) in [(1, 1, 1), (3, 2, 4), (8, 4, 3), (5, 3, 2)] {
            let x = random_map(&mut r, h, w, ci);
            let conv = random_conv(&mut r, ci, co);
            assert!(max_diff(&conv.forward(&x).unwrap(), &naive_conv(&x, &conv)) < 1e-12);
        }
    }
}

#[test]
fn delta_kernel_is_identity_and_zero_kernel_is_bias() {
    let mut r = rng::seeded(2);
    let x = random_map(&mut r, 4, 3, 2);
    let mut conv = Conv3x3::zeros(2, 2);
    for c in 0..2 {
        let i = conv.weight_index(c, c, 1, 1);
        conv.weight[i] = 1.0;
    }
    assert_eq!(conv.forward(&x).unwrap(), x);
    let mut biased = Conv3x3::zeros(2, 3);
    biased.bias = vec![0.5, -1.0, 2.0];
    let out = biased.forward(&x).unwrap();
    for i in 0..4 {
        for j in 0..3 {
            assert_eq!(out.pixel(i, j), &[0.5, -1.0, 2.0]);
        }
    }
}

#[test]
fn conv_rejects_channel_mismatch() {
    let x = FeatureMap::zeros(2, 2, 3);
    assert!(Conv3x3::zeros(2, 1).forward(&x).is_err());
}

#[test]
fn relu_examples() {
    let x = FeatureMap::new(1, 2, 1, vec![-1.0, 2.0]).unwrap();
    assert_eq!(relu(&x).data(), &[0.0, 2.0]);
}

#[test]
fn residual_block_matches_composed_oracle() {
    let mut r = rng::seeded(3);
    for _ in 0..10 {
        let x = random_map(&mut r, 3, 3, 2);
        let block = ResidualBlock::new(random_conv(&mut r, 2, 2), random_conv(&mut r, 2, 2)).unwrap();
        assert!(max_diff(&block.forward(&x).unwrap(), &naive_block(&x, &block)) < 1e-12);
    }
}

#[test]
fn residual_group_matches_chained_oracle() {
    let mut r = rng::seeded(4);
    let group = ResidualGroup {
        blocks: (0..4)
            .map(|_| ResidualBlock::new(random_conv(&mut r, 3, 3), random_conv(&mut r, 3, 3)).unwrap())
            .collect(),
    };
    let x = random_map(&mut r, 4, 5, 3);
    let expected = group.blocks.iter().fold(x.clone(), |acc, b| naive_block(&acc, b));
    assert!(max_diff(&group.forward(&x).unwrap(), &expected) < 1e-10);
    let single = ResidualGroup {
        blocks: vec![group.blocks[0].clone()],
    };
    assert_eq!(single.forward(&x).unwrap(), group.blocks[0].forward(&x).unwrap());
}

#[test]
fn zero_block_rejects_shape_change() {
    assert!(ResidualBlock::new(Conv3x3::zeros(2, 3), Conv3x3::zeros(3, 2)).is_err());
}

#[test]
fn attention_matches_softmax_weighted_sum_oracle() {
    let mut r = rng::seeded(5);
    let x = random_map(&mut r, 4, 4, 3);
    let pool = AttentionPool::new(random_conv(&mut r, 3, 1)).unwrap();
    let (pooled, attn) = pool.forward(&x).unwrap();
    let scores = naive_conv(&x, &pool.score);
    let m = scores.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.data().iter().map(|s| (s - m).exp()).collect();
    let z: f64 = e.iter().sum();
    for c in 0..3 {
        let mut want = 0.0;
        for p in 0..16 {
            want += e[p] / z * x.data()[p * 3 + c];
        }
        assert!((pooled[c] - want).abs() < 1e-12);
    }
    assert!((attn.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn zero_attention_is_spatial_mean() {
    let mut r = rng::seeded(6);
    let x = random_map(&mut r, 3, 5, 4);
    let (pooled, attn) = AttentionPool::zeros(4).forward(&x).unwrap();
    assert!(attn.weights.iter().all(|&a| (a - 1.0 / 15.0).abs() < 1e-15));
    let mean = spatial_average_pool(&x);
    for (p, m) in pooled.iter().zip(&mean) {
        assert!((p - m).abs() < 1e-12);
    }
}

#[test]
fn saturated_attention_picks_one_location() {
    // Only (1, 1) has a nonzero first channel; the centre tap on it scores 50 there.
    let mut x = FeatureMap::zeros(3, 3, 2);
    x.set(1, 1, 0, 1.0);
    x.set(1, 1, 1, 0.7);
    x.set(0, 2, 1, -0.3);
    let mut score = Conv3x3::zeros(2, 1);
    let i = score.weight_index(0, 0, 1, 1);
    score.weight[i] = 50.0;
    let (pooled, attn) = AttentionPool::new(score).unwrap().forward(&x).unwrap();
    assert!(attn.get(1, 1) > 1.0 - 1e-6);
    assert!((pooled[0] - 1.0).abs() < 1e-6);
    assert!((pooled[1] - 0.7).abs() < 1e-6);
}

#[test]
fn l2_examples() {
    let y = l2_normalize(&[3.0, 4.0]);
    assert!((y[0] - 0.6).abs() < 1e-15 && (y[1] - 0.8).abs() < 1e-15);
    assert_eq!(l2_normalize(&[0.0, 0.0, 0.0]), vec![0.0; 3]);
    assert_eq!(l2_normalize(&[0.0, 1.0]), vec![0.0, 1.0]);
}

#[test]
fn average_pool_matches_direct_mean() {
    let mut r = rng::seeded(7);
    let x = random_map(&mut r, 3, 3, 2);
    let out = spatial_average_pool(&x);
    for c in 0..2 {
        let want: f64 = (0..9).map(|p| x.data()[p * 2 + c]).sum::<f64>() / 9.0;
        assert!((out[c] - want).abs() < 1e-15);
    }
}

#[test]
fn linear_matches_explicit_dot_products() {
    let fc = Linear::new(2, 3, vec![1.0, 2.0, -1.0, 0.5, 0.0, 3.0], vec![0.1, 0.2, 0.3]).unwrap();
    let out = fc.forward(&[2.0, -1.0]).unwrap();
    let want = [1.0 * 2.0 - 2.0 + 0.1, -2.0 - 0.5 + 0.2, -3.0 + 0.3];
    for (o, w) in out.iter().zip(want) {
        assert!((o - w).abs() < 1e-15);
    }
    assert_eq!(fc.forward(&[0.0, 0.0]).unwrap(), vec![0.1, 0.2, 0.3]);
    assert!(fc.forward(&[1.0]).is_err());
}

#[test]
fn cross_entropy_examples() {
    let (loss, p) = softmax_cross_entropy(&[0.0; 5], 2).unwrap();
    assert!((loss - 5f64.ln()).abs() < 1e-12);
    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    let (loss, p) = softmax_cross_entropy(&[10.0, 0.0, 0.0], 0).unwrap();
    assert!((loss - (1.0 + 2.0 * (-10f64).exp()).ln()).abs() < 1e-15);
    let g = softmax_cross_entropy_backward(&p, 0);
    assert!((g[0] - (p[0] - 1.0)).abs() < 1e-15 && g[1] == p[1]);
    assert!(softmax_cross_entropy(&[1.0, 2.0], 2).is_err());
}

#[test]
fn every_layer_backward_passes_finite_differences() {
    for report in checks::gradient_suite(17, 20).unwrap() {
        assert!(report.passed(), "{report:?}");
        assert!(report.instances >= 20);
    }
}

proptest! {
    #[test]
    fn attention_weights_form_a_distribution(
        seed in any::<u64>(), h in 1usize..6, w in 1usize..6, c in 1usize..4, scale in 0.0f64..30.0,
    ) {
        let mut r = rng::seeded(seed);
        let x = random_map(&mut r, h, w, c).scaled(scale);
        let pool = AttentionPool::new(random_conv(&mut r, c, 1)).unwrap();
        let (_, attn) = pool.forward(&x).unwrap();
        prop_assert!(attn.weights.iter().all(|&a| a >= 0.0));
        prop_assert!((attn.weights.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn l2_norm_is_zero_or_one(x in prop::collection::vec(-1e6f64..1e6, 1..20), tiny in any::<bool>()) {
        let x: Vec<f64> = if tiny { x.iter().map(|v| v * 1e-20).collect() } else { x };
        let n = l2_normalize(&x).iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!(n == 0.0 || (n - 1.0).abs() <= 1e-9, "norm {}", n);
    }

    #[test]
    fn zero_group_is_identity_on_nonnegative_maps(
        seed in any::<u64>(), h in 1usize..5, w in 1usize..5, c in 1usize..4, blocks in 1usize..5,
    ) {
        let mut r = rng::seeded(seed);
        let x = FeatureMap::new(h, w, c, (0..h * w * c).map(|_| rng::unit_f64(&mut r) * 10.0).collect()).unwrap();
        prop_assert_eq!(ResidualGroup::zeros(c, blocks).forward(&x).unwrap(), x);
    }

    #[test]
    fn probabilities_sum_to_one(logits in prop::collection::vec(-500.0f64..500.0, 2..12)) {
        let (loss, p) = softmax_cross_entropy(&logits, 0).unwrap();
        prop_assert!(loss >= 0.0 && loss.is_finite());
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    }
}
