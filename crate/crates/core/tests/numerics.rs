use coinnet::numerics::{circular_convolve, circular_correlate, dft, idft, Convolver, FftPlan};
use coinnet::rng;
use num_complex::Complex64;
use proptest::prelude::*;

fn naive_dft(x: &[f64]) -> Vec<Complex64> {
    let n = x.len();
    (0..n)
        .map(|k| {
            x.iter()
                .enumerate()
                .map(|(j, &v)| {
                    let phase = -2.0 * std::f64::consts::PI * ((j * k) % n) as f64 / n as f64;
                    Complex64::from_polar(v, phase)
                })
                .sum()
        })
        .collect()
}

fn naive_convolve(a: &[f64], b: &[f64]) -> Vec<f64> {
    let n = a.len();
    (0..n)
        .map(|k| (0..n).map(|i| a[i] * b[(k + n - i) % n]).sum())
        .collect()
}

fn naive_correlate(x: &[f64], y: &[f64]) -> Vec<f64> {
    let n = x.len();
    (0..n).map(|k| (0..n).map(|i| x[(k + i) % n] * y[i]).sum()).collect()
}

fn random_vec(seed: u64, n: usize) -> Vec<f64> {
    let mut r = rng::seeded(seed);
    (0..n).map(|_| 2.0 * rng::unit_f64(&mut r) - 1.0).collect()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn dft_matches_naive_for_lengths_1_to_64() {
    for n in 1..=64 {
        let x = random_vec(n as u64, n);
        let fast = dft(&x).unwrap();
        let slow = naive_dft(&x);
        let err = fast.iter().zip(&slow).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        assert!(err < 1e-9, "n={n}: {err}");
    }
}

#[test]
fn round_trip_for_lengths_1_to_64() {
    for n in 1..=64 {
        let x = random_vec(100 + n as u64, n);
        let back = idft(&dft(&x).unwrap()).unwrap();
        assert!(max_abs_diff(&x, &back) <= 1e-10, "n={n}");
    }
}

#[test]
fn convolution_and_correlation_match_naive_for_lengths_1_to_64() {
    for n in 1..=64 {
        let a = random_vec(200 + n as u64, n);
        let b = random_vec(300 + n as u64, n);
        assert!(max_abs_diff(&circular_convolve(&a, &b).unwrap(), &naive_convolve(&a, &b)) <= 1e-8);
        assert!(max_abs_diff(&circular_correlate(&a, &b).unwrap(), &naive_correlate(&a, &b)) <= 1e-8);
        let c = Convolver::new(n).unwrap();
        assert!(max_abs_diff(&c.convolve(&a, &b), &naive_convolve(&a, &b)) <= 1e-8);
        assert!(max_abs_diff(&c.correlate(&a, &b), &naive_correlate(&a, &b)) <= 1e-8);
    }
}

#[test]
fn parseval_holds() {
    for n in [1, 2, 7, 16, 33, 64] {
        let x = random_vec(400 + n as u64, n);
        let time: f64 = x.iter().map(|v| v * v).sum();
        let freq: f64 = dft(&x).unwrap().iter().map(|c| c.norm_sqr()).sum::<f64>() / n as f64;
        assert!((time - freq).abs() < 1e-10 * time.max(1.0));
    }
}

#[test]
fn complex_plan_inverts_forward() {
    for n in [3, 8, 12, 31] {
        let plan = FftPlan::new(n).unwrap();
        let orig: Vec<Complex64> = (0..n).map(|i| Complex64::new(i as f64, -(i as f64) / 3.0)).collect();
        let mut data = orig.clone();
        plan.forward(&mut data);
        plan.inverse(&mut data);
        let err = data.iter().zip(&orig).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        assert!(err < 1e-12);
    }
}

#[test]
fn asymmetric_spectrum_is_rejected() {
    let mut spec = dft(&[1.0, 2.0, 3.0, 4.0]).unwrap();
    spec[1].im += 1.0;
    assert!(idft(&spec).is_err());
}

#[test]
fn mismatched_lengths_are_rejected() {
    assert!(circular_convolve(&[1.0, 2.0], &[1.0]).is_err());
    assert!(circular_correlate(&[1.0], &[1.0, 2.0]).is_err());
}

proptest! {
    #[test]
    fn dft_is_linear(x in prop::collection::vec(-10.0f64..10.0, 1..40), s in -3.0f64..3.0) {
        let y: Vec<f64> = x.iter().rev().copied().collect();
        let combo: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a + s * b).collect();
        let (fx, fy, fc) = (dft(&x).unwrap(), dft(&y).unwrap(), dft(&combo).unwrap());
        for k in 0..x.len() {
            prop_assert!((fc[k] - (fx[k] + fy[k] * s)).norm() < 1e-8);
        }
    }

    #[test]
    fn round_trip_is_identity(x in prop::collection::vec(-100.0f64..100.0, 1..80)) {
        let back = idft(&dft(&x).unwrap()).unwrap();
        prop_assert!(max_abs_diff(&x, &back) < 1e-9);
    }

    #[test]
    fn convolution_commutes(
        pair in (1usize..40).prop_flat_map(|n| (
            prop::collection::vec(-5.0f64..5.0, n),
            prop::collection::vec(-5.0f64..5.0, n),
        ))
    ) {
        let (a, b) = pair;
        let ab = circular_convolve(&a, &b).unwrap();
        let ba = circular_convolve(&b, &a).unwrap();
        prop_assert!(max_abs_diff(&ab, &ba) < 1e-9);
    }
}
