//! Length-n discrete Fourier transform and circular convolution.
//!
//! Conventions: the forward transform is unnormalized,
//! `X[k] = sum_i x[i] * exp(-2*pi*i*i*k/n)`, and the inverse carries the `1/n`
//! factor. Any length n >= 1 is supported: powers of two run an iterative
//! radix-2 kernel, every other length goes through Bluestein's chirp-z
//! reduction onto a power-of-two kernel, so the external contract is always
//! the exact length-n circular transform.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{ensure_finite, ensure_len, Error, Result};

/// Relative tolerance used by [`idft`] when checking conjugate symmetry.
pub const SYMMETRY_TOLERANCE: f64 = 1e-8;

/// A precomputed transform of fixed length.
#[derive(Debug, Clone)]
pub struct FftPlan {
    n: usize,
    kind: PlanKind,
}

#[derive(Debug, Clone)]
enum PlanKind {
    Radix2(Radix2),
    Bluestein(Box<Bluestein>),
}

#[derive(Debug, Clone)]
struct Radix2 {
    n: usize,
    // twiddles[k] = exp(-2*pi*i*k/n) for k < n/2
    twiddles: Vec<Complex64>,
    bitrev: Vec<usize>,
}

#[derive(Debug, Clone)]
struct Bluestein {
    inner: Radix2,
    // chirp[k] = exp(-i*pi*k^2/n)
    chirp: Vec<Complex64>,
    // forward transform of the conjugate chirp filter, length inner.n
    filter_spectrum: Vec<Complex64>,
}

impl Radix2 {
    fn new(n: usize) -> Self {
        debug_assert!(n.is_power_of_two());
        let twiddles = (0..n / 2)
            .map(|k| Complex64::from_polar(1.0, -2.0 * PI * k as f64 / n as f64))
            .collect();
        let bits = n.trailing_zeros();
        let bitrev = (0..n)
            .map(|i| {
                if bits == 0 {
                    0
                } else {
                    i.reverse_bits() >> (usize::BITS - bits)
                }
            })
            .collect();
        Radix2 { n, twiddles, bitrev }
    }

    fn forward(&self, data: &mut [Complex64]) {
        let n = self.n;
        for i in 0..n {
            let j = self.bitrev[i];
            if i < j {
                data.swap(i, j);
            }
        }
        let mut len = 2;
        while len <= n {
            let half = len / 2;
            let stride = n / len;
            for start in (0..n).step_by(len) {
                for k in 0..half {
                    let w = self.twiddles[k * stride];
                    let a = data[start + k];
                    let b = data[start + k + half] * w;
                    data[start + k] = a + b;
                    data[start + k + half] = a - b;
                }
            }
            len <<= 1;
        }
    }
}

impl Bluestein {
    fn new(n: usize) -> Self {
        let m = (2 * n - 1).next_power_of_two();
        let inner = Radix2::new(m);
        // k^2 mod 2n keeps the phase argument small for large k.
        let chirp: Vec<Complex64> = (0..n)
            .map(|k| {
                let k2 = (k as u128 * k as u128 % (2 * n as u128)) as f64;
                Complex64::from_polar(1.0, -PI * k2 / n as f64)
            })
            .collect();
        let mut filter = vec![Complex64::new(0.0, 0.0); m];
        filter[0] = chirp[0].conj();
        for k in 1..n {
            filter[k] = chirp[k].conj();
            filter[m - k] = chirp[k].conj();
        }
        inner.forward(&mut filter);
        Bluestein {
            inner,
            chirp,
            filter_spectrum: filter,
        }
    }

    fn forward(&self, data: &mut [Complex64]) {
        let m = self.inner.n;
        let n = data.len();
        let mut work = vec![Complex64::new(0.0, 0.0); m];
        for k in 0..n {
            work[k] = data[k] * self.chirp[k];
        }
        self.inner.forward(&mut work);
        for (w, f) in work.iter_mut().zip(&self.filter_spectrum) {
            *w *= f;
        }
        // inverse via conjugation
        for w in work.iter_mut() {
            *w = w.conj();
        }
        self.inner.forward(&mut work);
        let scale = 1.0 / m as f64;
        for k in 0..n {
            data[k] = work[k].conj() * scale * self.chirp[k];
        }
    }
}

impl FftPlan {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("transform length must be >= 1".into()));
        }
        let kind = if n.is_power_of_two() {
            PlanKind::Radix2(Radix2::new(n))
        } else {
            PlanKind::Bluestein(Box::new(Bluestein::new(n)))
        };
        Ok(FftPlan { n, kind })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// In-place unnormalized forward transform. `data.len()` must equal the plan length.
    pub fn forward(&self, data: &mut [Complex64]) {
        assert_eq!(data.len(), self.n, "buffer length does not match plan");
        match &self.kind {
            PlanKind::Radix2(r) => r.forward(data),
            PlanKind::Bluestein(b) => b.forward(data),
        }
    }

    /// In-place inverse transform including the `1/n` factor.
    pub fn inverse(&self, data: &mut [Complex64]) {
        for z in data.iter_mut() {
            *z = z.conj();
        }
        self.forward(data);
        let scale = 1.0 / self.n as f64;
        for z in data.iter_mut() {
            *z = z.conj() * scale;
        }
    }
}

/// Forward DFT of a real signal.
pub fn dft(x: &[f64]) -> Result<Vec<Complex64>> {
    ensure_finite(x)?;
    let plan = FftPlan::new(x.len())?;
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    plan.forward(&mut buf);
    Ok(buf)
}

/// Inverse DFT of the spectrum of a real signal.
///
/// The spectrum must be conjugate-symmetric, `X[k] = conj(X[n-k])`, to within
/// [`SYMMETRY_TOLERANCE`] relative to the largest bin magnitude (absolute when
/// every bin is below 1). Anything else is reported as a corrupted spectrum.
pub fn idft(spectrum: &[Complex64]) -> Result<Vec<f64>> {
    let n = spectrum.len();
    if n == 0 {
        return Err(Error::InvalidArgument("transform length must be >= 1".into()));
    }
    for (index, z) in spectrum.iter().enumerate() {
        if !z.re.is_finite() {
            return Err(Error::NonFinite { index, value: z.re });
        }
        if !z.im.is_finite() {
            return Err(Error::NonFinite { index, value: z.im });
        }
    }
    let scale = spectrum.iter().map(|z| z.norm()).fold(1.0, f64::max);
    for k in 0..n {
        let mirror = spectrum[(n - k) % n].conj();
        let deviation = (spectrum[k] - mirror).norm();
        if deviation > SYMMETRY_TOLERANCE * scale {
            return Err(Error::AsymmetricSpectrum { index: k, deviation });
        }
    }
    let plan = FftPlan::new(n)?;
    let mut buf = spectrum.to_vec();
    plan.inverse(&mut buf);
    Ok(buf.into_iter().map(|z| z.re).collect())
}

/// `z[k] = sum_i a[i] * b[(k - i) mod n]`, evaluated in the frequency domain.
pub fn circular_convolve(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    ensure_len(a.len(), b.len())?;
    ensure_finite(a)?;
    ensure_finite(b)?;
    Ok(Convolver::new(a.len())?.convolve(a, b))
}

/// `z[k] = sum_i x[(k + i) mod n] * y[i]`, the adjoint of convolution by `y`.
pub fn circular_correlate(x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
    ensure_len(x.len(), y.len())?;
    ensure_finite(x)?;
    ensure_finite(y)?;
    Ok(Convolver::new(x.len())?.correlate(x, y))
}

/// Reusable length-n circular convolution/correlation of real signals.
///
/// Both operands are packed into one complex transform (`a + i*b`), so each
/// call costs one forward and one inverse transform. No input validation is
/// performed here; callers are the checked free functions and the sketch layer.
#[derive(Debug, Clone)]
pub struct Convolver {
    plan: FftPlan,
}

impl Convolver {
    pub fn new(n: usize) -> Result<Self> {
        Ok(Convolver { plan: FftPlan::new(n)? })
    }

    pub fn len(&self) -> usize {
        self.plan.len()
    }

    pub fn is_empty(&self) -> bool {
        self.plan.is_empty()
    }

    fn split_spectra(&self, a: &[f64], b: &[f64]) -> (Vec<Complex64>, Vec<Complex64>) {
        let n = self.plan.len();
        let mut z: Vec<Complex64> = a.iter().zip(b).map(|(&re, &im)| Complex64::new(re, im)).collect();
        self.plan.forward(&mut z);
        let mut fa = Vec::with_capacity(n);
        let mut fb = Vec::with_capacity(n);
        for k in 0..n {
            let zk = z[k];
            let zm = z[(n - k) % n].conj();
            fa.push((zk + zm) * 0.5);
            // (zk - zm) / 2i
            let diff = (zk - zm) * 0.5;
            fb.push(Complex64::new(diff.im, -diff.re));
        }
        (fa, fb)
    }

    fn real_inverse(&self, mut spectrum: Vec<Complex64>) -> Vec<f64> {
        self.plan.inverse(&mut spectrum);
        spectrum.into_iter().map(|z| z.re).collect()
    }

    pub fn convolve(&self, a: &[f64], b: &[f64]) -> Vec<f64> {
        let (fa, fb) = self.split_spectra(a, b);
        let prod = fa.iter().zip(&fb).map(|(x, y)| x * y).collect();
        self.real_inverse(prod)
    }

    pub fn correlate(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        let (fx, fy) = self.split_spectra(x, y);
        let prod = fx.iter().zip(&fy).map(|(p, q)| p * q.conj()).collect();
        self.real_inverse(prod)
    }
}
