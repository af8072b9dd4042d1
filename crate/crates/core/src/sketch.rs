//! Count Sketch projection and Tensor Sketch (compact bilinear pooling).
//!
//! A Count Sketch maps `x` (length n) to `y` (length d) with a fixed random
//! sign `u[i]` and bucket `v[i]`: `y[v[i]] += u[i] * x[i]`. The Tensor Sketch
//! of an outer product `a (x) b` is the circular convolution of the two
//! Count Sketches, which equals the Count Sketch of `vec(a (x) b)` under the
//! product hash `(v1[i] + v2[j]) mod d` with sign `u1[i] * u2[j]`, without
//! ever forming the n1*n2 outer product.

use crate::error::{ensure_finite, ensure_len, Error, Result};
use crate::numerics::Convolver;
use crate::rng::{self, GENERATOR_CHACHA8};

/// Largest outer product the brute-force oracle will materialize.
pub const ORACLE_SIZE_LIMIT: usize = 1_000_000;

/// Fixed random projection of one Count Sketch.
///
/// Fields are private: once drawn, the signs and buckets never change. The
/// vectors are fully determined by `(seed, n, d)` and are regenerated from
/// those values rather than persisted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SketchParams {
    seed: u64,
    d: usize,
    signs: Vec<i8>,
    indices: Vec<usize>,
}

impl SketchParams {
    /// Draws signs uniformly on {-1, +1} and buckets uniformly on `0..d`.
    ///
    /// The stream is ChaCha8 seeded with `seed`; all n signs are drawn first
    /// (low bit of `next_u64`), then all n buckets (rejection-sampled).
    pub fn generate(seed: u64, n: usize, d: usize) -> Result<Self> {
        if n == 0 || d == 0 {
            return Err(Error::InvalidArgument(format!(
                "sketch needs n >= 1 and d >= 1 (got n={n}, d={d})"
            )));
        }
        use rand::RngCore;
        let mut rng = rng::seeded(seed);
        let signs = (0..n).map(|_| if rng.next_u64() & 1 == 1 { 1 } else { -1 }).collect();
        let indices = (0..n)
            .map(|_| rng::uniform_below(&mut rng, d as u64) as usize)
            .collect();
        Ok(SketchParams {
            seed,
            d,
            signs,
            indices,
        })
    }

    /// Builds params from explicit vectors. Used for hand-constructed cases.
    pub fn from_parts(signs: Vec<i8>, indices: Vec<usize>, d: usize) -> Result<Self> {
        ensure_len(signs.len(), indices.len())?;
        if signs.is_empty() || d == 0 {
            return Err(Error::InvalidArgument("empty sketch".into()));
        }
        if let Some(i) = signs.iter().position(|s| *s != 1 && *s != -1) {
            return Err(Error::InvalidArgument(format!("sign at {i} is not +/-1")));
        }
        if let Some(i) = indices.iter().position(|&v| v >= d) {
            return Err(Error::InvalidArgument(format!(
                "bucket {} at {i} is out of range for d={d}",
                indices[i]
            )));
        }
        Ok(SketchParams {
            seed: 0,
            d,
            signs,
            indices,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn generator_id(&self) -> u32 {
        GENERATOR_CHACHA8
    }

    pub fn input_dim(&self) -> usize {
        self.signs.len()
    }

    pub fn output_dim(&self) -> usize {
        self.d
    }

    pub fn signs(&self) -> &[i8] {
        &self.signs
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    fn project_into(&self, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for ((&s, &j), &xi) in self.signs.iter().zip(&self.indices).zip(x) {
            out[j] += s as f64 * xi;
        }
    }

    fn transpose_into(&self, g: &[f64], out: &mut [f64]) {
        for ((o, &s), &j) in out.iter_mut().zip(&self.signs).zip(&self.indices) {
            *o = s as f64 * g[j];
        }
    }
}

/// Convenience wrapper over [`SketchParams::generate`].
pub fn make_sketch_params(seed: u64, n: usize, d: usize) -> Result<SketchParams> {
    SketchParams::generate(seed, n, d)
}

pub fn count_sketch(x: &[f64], p: &SketchParams) -> Result<Vec<f64>> {
    ensure_len(p.input_dim(), x.len())?;
    ensure_finite(x)?;
    let mut y = vec![0.0; p.d];
    p.project_into(x, &mut y);
    Ok(y)
}

/// Adjoint of [`count_sketch`]: `out[i] = u[i] * g[v[i]]`.
pub fn count_sketch_transpose(g: &[f64], p: &SketchParams) -> Result<Vec<f64>> {
    ensure_len(p.d, g.len())?;
    let mut out = vec![0.0; p.input_dim()];
    p.transpose_into(g, &mut out);
    Ok(out)
}

/// A pair of Count Sketches sharing an output dimension, with a cached
/// convolution plan. This is what the model applies at every grid location.
#[derive(Debug, Clone)]
pub struct TensorSketch {
    first: SketchParams,
    second: SketchParams,
    conv: Convolver,
}

impl TensorSketch {
    pub fn new(first: SketchParams, second: SketchParams) -> Result<Self> {
        if first.d != second.d {
            return Err(Error::ShapeMismatch(format!(
                "sketch output dims differ: {} vs {}",
                first.d, second.d
            )));
        }
        let conv = Convolver::new(first.d)?;
        Ok(TensorSketch { first, second, conv })
    }

    pub fn first(&self) -> &SketchParams {
        &self.first
    }

    pub fn second(&self) -> &SketchParams {
        &self.second
    }

    pub fn output_dim(&self) -> usize {
        self.first.d
    }

    fn check_inputs(&self, a: &[f64], b: &[f64]) -> Result<()> {
        ensure_len(self.first.input_dim(), a.len())?;
        ensure_len(self.second.input_dim(), b.len())
    }

    pub fn forward(&self, a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
        self.check_inputs(a, b)?;
        Ok(self.forward_unchecked(a, b))
    }

    pub(crate) fn forward_unchecked(&self, a: &[f64], b: &[f64]) -> Vec<f64> {
        let d = self.first.d;
        let mut sa = vec![0.0; d];
        let mut sb = vec![0.0; d];
        self.first.project_into(a, &mut sa);
        self.second.project_into(b, &mut sb);
        self.conv.convolve(&sa, &sb)
    }

    /// Gradients of `<forward(a, b), upstream>` with respect to `a` and `b`.
    pub fn backward(&self, a: &[f64], b: &[f64], upstream: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_inputs(a, b)?;
        ensure_len(self.first.d, upstream.len())?;
        let d = self.first.d;
        let mut sa = vec![0.0; d];
        let mut sb = vec![0.0; d];
        self.first.project_into(a, &mut sa);
        self.second.project_into(b, &mut sb);
        let ga = self.conv.correlate(upstream, &sb);
        let gb = self.conv.correlate(upstream, &sa);
        let mut grad_a = vec![0.0; a.len()];
        let mut grad_b = vec![0.0; b.len()];
        self.first.transpose_into(&ga, &mut grad_a);
        self.second.transpose_into(&gb, &mut grad_b);
        Ok((grad_a, grad_b))
    }
}

pub fn tensor_sketch(a: &[f64], b: &[f64], p1: &SketchParams, p2: &SketchParams) -> Result<Vec<f64>> {
    ensure_finite(a)?;
    ensure_finite(b)?;
    TensorSketch::new(p1.clone(), p2.clone())?.forward(a, b)
}

pub fn tensor_sketch_backward(
    a: &[f64],
    b: &[f64],
    p1: &SketchParams,
    p2: &SketchParams,
    upstream: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    TensorSketch::new(p1.clone(), p2.clone())?.backward(a, b, upstream)
}

/// Reference sketch that materializes `vec(a (x) b)` and hashes every entry
/// with the product hash. Quadratic memory; guarded by [`ORACLE_SIZE_LIMIT`].
pub fn bilinear_oracle_sketch(a: &[f64], b: &[f64], p1: &SketchParams, p2: &SketchParams) -> Result<Vec<f64>> {
    ensure_len(p1.input_dim(), a.len())?;
    ensure_len(p2.input_dim(), b.len())?;
    if p1.d != p2.d {
        return Err(Error::ShapeMismatch(format!(
            "sketch output dims differ: {} vs {}",
            p1.d, p2.d
        )));
    }
    let size = a.len().saturating_mul(b.len());
    if size > ORACLE_SIZE_LIMIT {
        return Err(Error::SizeGuard {
            size,
            limit: ORACLE_SIZE_LIMIT,
        });
    }
    let d = p1.d;
    let outer: Vec<f64> = a.iter().flat_map(|&ai| b.iter().map(move |&bj| ai * bj)).collect();
    let mut out = vec![0.0; d];
    for i in 0..a.len() {
        for j in 0..b.len() {
            let bucket = (p1.indices[i] + p2.indices[j]) % d;
            let sign = (p1.signs[i] * p2.signs[j]) as f64;
            out[bucket] += sign * outer[i * b.len() + j];
        }
    }
    Ok(out)
}
