#![allow(clippy::needless_range_loop)]

use coinnet::checks::{self, sketch_unbiasedness_with};
use coinnet::error::Result;
use coinnet::rng;
use coinnet::sketch::{
    bilinear_oracle_sketch, count_sketch, count_sketch_transpose, make_sketch_params, tensor_sketch,
    tensor_sketch_backward, SketchParams, TensorSketch,
};
use proptest::prelude::*;

fn random_vec(r: &mut rng::Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| 2.0 * rng::unit_f64(r) - 1.0).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Count sketch of the flattened outer product, written out from scratch.
fn outer_product_oracle(a: &[f64], b: &[f64], p1: &SketchParams, p2: &SketchParams) -> Vec<f64> {
    let d = p1.output_dim();
    let mut y = vec![0.0; d];
    for i in 0..a.len() {
        for j in 0..b.len() {
            let k = (p1.indices()[i] + p2.indices()[j]) % d;
            y[k] += f64::from(p1.signs()[i]) * f64::from(p2.signs()[j]) * a[i] * b[j];
        }
    }
    y
}

#[test]
fn count_sketch_worked_example() {
    let p = SketchParams::from_parts(vec![1, -1, 1], vec![0, 2, 0], 3).unwrap();
    assert_eq!(count_sketch(&[1.0, 2.0, 3.0], &p).unwrap(), vec![4.0, 0.0, -2.0]);
}

#[test]
fn tensor_sketch_matches_independent_oracle() {
    let mut r = rng::seeded(7);
    for trial in 0..200 {
        let (n1, n2, d) = (1 + trial % 9, 1 + (trial * 7) % 11, 1 + trial % 13);
        let p1 = make_sketch_params(rng::derive_seed(7, "p1", trial as u64), n1, d).unwrap();
        let p2 = make_sketch_params(rng::derive_seed(7, "p2", trial as u64), n2, d).unwrap();
        let a = random_vec(&mut r, n1);
        let b = random_vec(&mut r, n2);
        let fast = tensor_sketch(&a, &b, &p1, &p2).unwrap();
        let oracle = outer_product_oracle(&a, &b, &p1, &p2);
        let library = bilinear_oracle_sketch(&a, &b, &p1, &p2).unwrap();
        for k in 0..d {
            assert!((fast[k] - oracle[k]).abs() <= 1e-8);
            assert!((library[k] - oracle[k]).abs() <= 1e-12);
        }
    }
}

#[test]
fn transpose_is_adjoint() {
    let mut r = rng::seeded(11);
    for t in 0..100u64 {
        let (n, d) = (1 + (t % 20) as usize, 1 + (t % 7) as usize);
        let p = make_sketch_params(t, n, d).unwrap();
        let x = random_vec(&mut r, n);
        let g = random_vec(&mut r, d);
        let lhs = dot(&count_sketch(&x, &p).unwrap(), &g);
        let rhs = dot(&x, &count_sketch_transpose(&g, &p).unwrap());
        assert!((lhs - rhs).abs() < 1e-12);
    }
}

#[test]
fn backward_matches_finite_differences() {
    let report = checks::check_tensor_sketch(3, 50).unwrap();
    assert!(report.passed(), "{report:?}");
    assert!(report.instances >= 50);
}

#[test]
fn backward_free_function_matches_struct() {
    let p1 = make_sketch_params(1, 5, 4).unwrap();
    let p2 = make_sketch_params(2, 6, 4).unwrap();
    let a = [0.1, -0.4, 0.3, 0.9, -1.0];
    let b = [1.0, 0.5, -0.5, 0.25, 0.0, 2.0];
    let up = [1.0, -1.0, 0.5, 2.0];
    let ts = TensorSketch::new(p1.clone(), p2.clone()).unwrap();
    assert_eq!(
        ts.backward(&a, &b, &up).unwrap(),
        tensor_sketch_backward(&a, &b, &p1, &p2, &up).unwrap()
    );
}

#[test]
fn signed_sketch_is_unbiased() {
    let report = checks::sketch_unbiasedness(64, 32, 10_000, 0).unwrap();
    assert_eq!(report.passed(), Some(true), "{report:?}");
}

fn unsigned_sketch(x: &[f64], p: &SketchParams) -> Result<Vec<f64>> {
    let mut y = vec![0.0; p.output_dim()];
    for (v, &k) in x.iter().zip(p.indices()) {
        y[k] += v;
    }
    Ok(y)
}

#[test]
fn sign_free_sketch_fails_unbiasedness() {
    let report = sketch_unbiasedness_with(64, 32, 10_000, 0, unsigned_sketch).unwrap();
    assert_eq!(report.passed(), Some(false), "{report:?}");
}

#[test]
fn params_are_reproducible_from_seed() {
    let a = make_sketch_params(42, 100, 16).unwrap();
    let b = make_sketch_params(42, 100, 16).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, make_sketch_params(43, 100, 16).unwrap());
    assert!(a.indices().iter().all(|&k| k < 16));
    assert!(a.signs().iter().all(|&s| s == 1 || s == -1));
}

#[test]
fn invalid_inputs_are_rejected() {
    assert!(make_sketch_params(0, 4, 0).is_err());
    let p = make_sketch_params(0, 4, 3).unwrap();
    assert!(count_sketch(&[1.0; 5], &p).is_err());
    assert!(count_sketch(&[1.0, f64::NAN, 0.0, 0.0], &p).is_err());
    assert!(SketchParams::from_parts(vec![1, 0], vec![0, 1], 2).is_err());
    assert!(SketchParams::from_parts(vec![1, 1], vec![0, 2], 2).is_err());
}

proptest! {
    #[test]
    fn count_sketch_is_linear(
        x in prop::collection::vec(-10.0f64..10.0, 12),
        y in prop::collection::vec(-10.0f64..10.0, 12),
        s in -4.0f64..4.0,
        seed in any::<u64>(),
    ) {
        let p = make_sketch_params(seed, 12, 5).unwrap();
        let combo: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a + s * b).collect();
        let (cx, cy, cc) = (count_sketch(&x, &p).unwrap(), count_sketch(&y, &p).unwrap(), count_sketch(&combo, &p).unwrap());
        for k in 0..5 {
            prop_assert!((cc[k] - (cx[k] + s * cy[k])).abs() < 1e-9);
        }
    }

    #[test]
    fn tensor_sketch_is_bilinear(
        a in prop::collection::vec(-3.0f64..3.0, 6),
        b in prop::collection::vec(-3.0f64..3.0, 6),
        s in -4.0f64..4.0,
        seed in any::<u64>(),
    ) {
        let p1 = make_sketch_params(seed, 6, 8).unwrap();
        let p2 = make_sketch_params(seed ^ 1, 6, 8).unwrap();
        let base = tensor_sketch(&a, &b, &p1, &p2).unwrap();
        let sa: Vec<f64> = a.iter().map(|v| v * s).collect();
        let scaled = tensor_sketch(&sa, &b, &p1, &p2).unwrap();
        for k in 0..8 {
            prop_assert!((scaled[k] - s * base[k]).abs() < 1e-9);
        }
    }
}
