//! Numeric self-checks: sketch oracle equivalence, sketch unbiasedness and
//! central finite-difference gradient suites for every layer and the full
//! model. The finite-difference side only ever calls forward passes.

use rand::RngCore;
use serde::Serialize;

use crate::error::Result;
use crate::layers::{
    l2_normalize, l2_normalize_backward, relu, relu_backward, softmax_cross_entropy, softmax_cross_entropy_backward,
    spatial_average_pool, spatial_average_pool_backward, AttentionPool, Conv3x3, FeatureMap, Linear, ResidualBlock,
    ResidualGroup,
};
use crate::model::{ModelConfig, ModelParams};
use crate::rng::{self, Rng};
use crate::sketch::{bilinear_oracle_sketch, count_sketch, make_sketch_params, SketchParams, TensorSketch};

/// Step for layer and model finite differences.
pub const FD_STEP: f64 = 1e-5;
/// Step for the tensor-sketch finite differences.
pub const SKETCH_FD_STEP: f64 = 1e-6;
pub const LAYER_GRAD_TOLERANCE: f64 = 1e-4;
pub const SKETCH_GRAD_TOLERANCE: f64 = 1e-6;
pub const SKETCH_EQUIVALENCE_TOLERANCE: f64 = 1e-8;
/// Denominator floor of [`relative_error`].
pub const RELATIVE_FLOOR: f64 = 1e-6;
/// Instances with a ReLU pre-activation closer than this to zero are redrawn,
/// since a finite-difference probe may straddle the kink.
pub const KINK_MARGIN: f64 = 1e-2;
const MAX_REDRAWS: usize = 10_000;

fn clear_of_kinks(group: &ResidualGroup, x: &FeatureMap) -> Result<bool> {
    let (_, caches) = group.forward_cached(x)?;
    Ok(caches.iter().all(|c| c.relu_margin() >= KINK_MARGIN))
}

fn redraw_error() -> crate::error::Error {
    crate::error::Error::InvalidArgument(format!("no kink-free instance in {MAX_REDRAWS} draws"))
}

/// `|a - b| / max(|a|, |b|, RELATIVE_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(RELATIVE_FLOOR)
}

fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| relative_error(*a, *n))
        .fold(0.0, f64::max)
}

/// Central differences of `f` at `x`.
pub fn central_differences(x: &[f64], step: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let up = f(&probe);
            probe[i] = orig - step;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng::unit_f64(rng)
}

fn random_vec(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| uniform(rng, -1.0, 1.0)).collect()
}

fn random_map(rng: &mut Rng, h: usize, w: usize, c: usize) -> FeatureMap {
    FeatureMap::new(h, w, c, random_vec(rng, h * w * c)).unwrap()
}

fn random_conv(rng: &mut Rng, ci: usize, co: usize, scale: f64) -> Conv3x3 {
    let mut conv = Conv3x3::zeros(ci, co);
    conv.weight
        .iter_mut()
        .for_each(|v| *v = scale * uniform(rng, -1.0, 1.0));
    conv.bias.iter_mut().for_each(|v| *v = scale * uniform(rng, -1.0, 1.0));
    conv
}

fn map_with(shape: (usize, usize, usize), data: &[f64]) -> FeatureMap {
    FeatureMap::new(shape.0, shape.1, shape.2, data.to_vec()).unwrap()
}

/// Outcome of one finite-difference suite.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheck {
    pub name: String,
    pub instances: usize,
    pub max_relative_error: f64,
    pub tolerance: f64,
    /// seed of the worst instance
    pub worst_seed: u64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_relative_error <= self.tolerance
    }
}

fn run_suite(
    name: &str,
    instances: usize,
    seed: u64,
    tolerance: f64,
    mut one: impl FnMut(&mut Rng) -> Result<f64>,
) -> Result<GradCheck> {
    let mut worst = (0.0f64, seed);
    for i in 0..instances {
        let inst_seed = rng::derive_seed(seed, name, i as u64);
        let err = one(&mut rng::seeded(inst_seed))?;
        if err > worst.0 || err.is_nan() {
            worst = (err, inst_seed);
        }
    }
    Ok(GradCheck {
        name: name.to_string(),
        instances,
        max_relative_error: worst.0,
        tolerance,
        worst_seed: worst.1,
    })
}

pub fn check_conv3x3(seed: u64, instances: usize) -> Result<GradCheck> {
    run_suite("conv3x3", instances, seed, LAYER_GRAD_TOLERANCE, |rng| {
        let (h, w) = (
            1 + rng::uniform_below(rng, 3) as usize,
            1 + rng::uniform_below(rng, 3) as usize,
        );
        let (ci, co) = (
            1 + rng::uniform_below(rng, 3) as usize,
            1 + rng::uniform_below(rng, 3) as usize,
        );
        let x = random_map(rng, h, w, ci);
        let conv = random_conv(rng, ci, co, 1.0);
        let up = random_map(rng, h, w, co);
        let (gx, gp) = conv.backward(&x, &up)?;
        let fx = central_differences(x.data(), FD_STEP, |d| {
            dot(conv.forward(&map_with(x.shape(), d)).unwrap().data(), up.data())
        });
        let fw = central_differences(&conv.weight, FD_STEP, |d| {
            let c = Conv3x3::new(ci, co, d.to_vec(), conv.bias.clone()).unwrap();
            dot(c.forward(&x).unwrap().data(), up.data())
        });
        let fb = central_differences(&conv.bias, FD_STEP, |d| {
            let c = Conv3x3::new(ci, co, conv.weight.clone(), d.to_vec()).unwrap();
            dot(c.forward(&x).unwrap().data(), up.data())
        });
        Ok(max_relative_error(gx.data(), &fx)
            .max(max_relative_error(&gp.weight, &fw))
            .max(max_relative_error(&gp.bias, &fb)))
    })
}

pub fn check_relu(seed: u64, instances: usize) -> Result<GradCheck> {
    run_suite("relu", instances, seed, LAYER_GRAD_TOLERANCE, |rng| {
        // keep inputs away from the kink
        let data: Vec<f64> = (0..12)
            .map(|_| {
                let m = uniform(rng, 0.05, 1.0);
                if rng::uniform_below(rng, 2) == 0 {
                    m
                } else {
                    -m
                }
            })
            .collect();
        let x = map_with((2, 3, 2), &data);
        let up = random_map(rng, 2, 3, 2);
        let g = relu_backward(&x, &up)?;
        let f = central_differences(x.data(), FD_STEP, |d| {
            dot(relu(&map_with(x.shape(), d)).data(), up.data())
        });
        Ok(max_relative_error(g.data(), &f))
    })
}

fn check_block_like(rng: &mut Rng, blocks: usize) -> Result<f64> {
    let (group, x) = (0..MAX_REDRAWS)
        .map(|_| {
            let c = 1 + rng::uniform_below(rng, 3) as usize;
            let (h, w) = (
                2 + rng::uniform_below(rng, 2) as usize,
                2 + rng::uniform_below(rng, 2) as usize,
            );
            let group = ResidualGroup {
                blocks: (0..blocks)
                    .map(|_| ResidualBlock::new(random_conv(rng, c, c, 0.5), random_conv(rng, c, c, 0.5)).unwrap())
                    .collect(),
            };
            let x = random_map(rng, h, w, c);
            (group, x)
        })
        .find(|(g, x)| clear_of_kinks(g, x).unwrap_or(false))
        .ok_or_else(redraw_error)?;
    let (h, w, c) = x.shape();
    let up = random_map(rng, h, w, c);
    let (_, caches) = group.forward_cached(&x)?;
    let (gx, gp) = group.backward(&caches, &up)?;
    let fx = central_differences(x.data(), FD_STEP, |d| {
        dot(group.forward(&map_with(x.shape(), d)).unwrap().data(), up.data())
    });
    let mut err = max_relative_error(gx.data(), &fx);
    for b in 0..blocks {
        for which in 0..2 {
            for bias in [false, true] {
                let pick = |g: &ResidualGroup| -> Vec<f64> {
                    let conv = if which == 0 {
                        &g.blocks[b].conv1
                    } else {
                        &g.blocks[b].conv2
                    };
                    if bias {
                        conv.bias.clone()
                    } else {
                        conv.weight.clone()
                    }
                };
                let base = pick(&group);
                let f = central_differences(&base, FD_STEP, |d| {
                    let mut g = group.clone();
                    let conv = if which == 0 {
                        &mut g.blocks[b].conv1
                    } else {
                        &mut g.blocks[b].conv2
                    };
                    if bias {
                        conv.bias = d.to_vec();
                    } else {
                        conv.weight = d.to_vec();
                    }
                    dot(g.forward(&x).unwrap().data(), up.data())
                });
                err = err.max(max_relative_error(&pick(&gp), &f));
            }
        }
    }
    Ok(err)
}

pub fn check_residual_block(seed: u64, instances: usize) -> Result<GradCheck> {
    run_suite("residual_block", instances, seed, LAYER_GRAD_TOLERANCE, |rng| {
        check_block_like(rng, 1)
    })
}

pub fn check_residual_group(seed: u64, instances: usize) -> Result<GradCheck> {
    run_suite("residual_group", instances, seed, LAYER_GRAD_TOLERANCE, |rng| {
        check_block_like(rng, 4)
    })
}

pub fn check_attention_pool(seed: u64, instances: usize) -> Result<GradCheck> {
    run_suite("attention_pool", instances, seed, LAYER_GRAD_TOLERANCE, |rng| {
        let c = 1 + rng::uniform_below(rng, 4) as usize;
        let (h, w) = (
            1 + rng::uniform_below(rng, 4) as usize,
            1 + rng::uniform_below(rng, 4) as usize,
        );
        let pool = AttentionPool::new(random_conv(rng, c, 1, 1.0))?;
        let x = random_map(rng, h, w, c);
        let up = random_vec(rng, c);
        let (_, attn) = pool.forward(&x)?;
        let (gx, gp) = pool.backward(&x, &attn, &up)?;
        let fx = central_differences(x.data(), FD_STEP, |d| {
            dot(&pool.forward(&map_with(x.shape(), d)).unwrap().0, &up)
        });
        let fw = central_differences(&pool.score.weight, FD_STEP, |d| {
            let mut p = pool.clone();
            p.score.weight = d.to_vec();
            dot(&p.forward(&x).unwrap().0, &up)
        });
        let fb = central_differences(&pool.score.bias, FD_STEP, |d| {
            let mut p = pool.clone();
            p.score.bias = d.to_vec();
            dot(&p.forward(&x).unwrap().0, &up)
        });
        Ok(max_relative_error(gx.data(), &fx)
            .max(max_relative_error(&gp.score.weight, &fw))
            .max(max_relative_error(&gp.score.bias, &fb)))
    })
}

pub fn check_l2_normalize(seed: u64, instances: usize) -> Result<GradCheck> {
    run_suite("l2_normalize", instances, seed, LAYER_GRAD_TOLERANCE, |rng| {
        let n = 1 + rng::uniform_below(rng, 8) as usize;
        let x = random_vec(rng, n);
        let up = random_vec(rng, n);
        let g = l2_normalize_backward(&x, &up)?;
        let f = central_differences(&x, FD_STEP, |d| dot(&l2_normalize(d), &up));
        Ok(max_relative_error(&g, &f))
    })
}

pub fn check_spatial_average_pool(seed: u64, instances: usize) -> Result<GradCheck> {
    run_suite("spatial_average_pool", instances, seed, LAYER_GRAD_TOLERANCE, |rng| {
        let (h, w, c) = (
            1 + rng::uniform_below(rng, 3) as usize,
            1 + rng::uniform_below(rng, 3) as usize,
            1 + rng::uniform_below(rng, 3) as usize,
        );
        let x = random_map(rng, h, w, c);
        let up = random_vec(rng, c);
        let g = spatial_average_pool_backward(h, w, &up);
        let f = central_differences(x.data(), FD_STEP, |d| {
            dot(&spatial_average_pool(&map_with(x.shape(), d)), &up)
        });
        Ok(max_relative_error(g.data(), &f))
    })
}

pub fn check_fully_connected(seed: u64, instances: usize) -> Result<GradCheck> {
    run_suite("fully_connected", instances, seed, LAYER_GRAD_TOLERANCE, |rng| {
        let (m, k) = (
            1 + rng::uniform_below(rng, 5) as usize,
            1 + rng::uniform_below(rng, 4) as usize,
        );
        let fc = Linear::new(m, k, random_vec(rng, m * k), random_vec(rng, k))?;
        let x = random_vec(rng, m);
        let up = random_vec(rng, k);
        let (gx, gp) = fc.backward(&x, &up)?;
        let fx = central_differences(&x, FD_STEP, |d| dot(&fc.forward(d).unwrap(), &up));
        let fw = central_differences(&fc.weight, FD_STEP, |d| {
            dot(
                &Linear::new(m, k, d.to_vec(), fc.bias.clone())
                    .unwrap()
                    .forward(&x)
                    .unwrap(),
                &up,
            )
        });
        let fb = central_differences(&fc.bias, FD_STEP, |d| {
            dot(
                &Linear::new(m, k, fc.weight.clone(), d.to_vec())
                    .unwrap()
                    .forward(&x)
                    .unwrap(),
                &up,
            )
        });
        Ok(max_relative_error(&gx, &fx)
            .max(max_relative_error(&gp.weight, &fw))
            .max(max_relative_error(&gp.bias, &fb)))
    })
}

pub fn check_softmax_cross_entropy(seed: u64, instances: usize) -> Result<GradCheck> {
    run_suite("softmax_cross_entropy", instances, seed, LAYER_GRAD_TOLERANCE, |rng| {
        let k = 2 + rng::uniform_below(rng, 5) as usize;
        let logits: Vec<f64> = (0..k).map(|_| uniform(rng, -3.0, 3.0)).collect();
        let target = rng::uniform_below(rng, k as u64) as usize;
        let (_, p) = softmax_cross_entropy(&logits, target)?;
        let g = softmax_cross_entropy_backward(&p, target);
        let f = central_differences(&logits, FD_STEP, |d| softmax_cross_entropy(d, target).unwrap().0);
        Ok(max_relative_error(&g, &f))
    })
}

pub fn check_tensor_sketch(seed: u64, instances: usize) -> Result<GradCheck> {
    run_suite("tensor_sketch", instances, seed, SKETCH_GRAD_TOLERANCE, |rng| {
        let (n1, n2, d) = (5, 5, 4);
        let p1 = make_sketch_params(rng.next_u64(), n1, d)?;
        let p2 = make_sketch_params(rng.next_u64(), n2, d)?;
        let ts = TensorSketch::new(p1, p2)?;
        let a = random_vec(rng, n1);
        let b = random_vec(rng, n2);
        let up = random_vec(rng, d);
        let (ga, gb) = ts.backward(&a, &b, &up)?;
        let fa = central_differences(&a, SKETCH_FD_STEP, |x| dot(&ts.forward(x, &b).unwrap(), &up));
        let fb = central_differences(&b, SKETCH_FD_STEP, |x| dot(&ts.forward(&a, x).unwrap(), &up));
        Ok(max_relative_error(&ga, &fa).max(max_relative_error(&gb, &fb)))
    })
}

/// The configuration used by the end-to-end gradient check.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        height: 2,
        width: 2,
        alpha_channels: 3,
        beta_channels: 3,
        sketch_dim: 4,
        blocks: 4,
        classes: 3,
    }
}

/// Full-model gradient of the cross-entropy loss versus central differences
/// over every trainable parameter. Biases are randomized too so that every
/// code path carries signal.
pub fn check_model(seed: u64, instances: usize) -> Result<GradCheck> {
    run_suite("model", instances, seed, LAYER_GRAD_TOLERANCE, |rng| {
        let cfg = tiny_model_config();
        let mut drawn = None;
        for _ in 0..MAX_REDRAWS {
            let mut params = ModelParams::init(cfg, rng.next_u64())?;
            for t in params.head.tensors_mut() {
                if t.is_bias {
                    t.values.iter_mut().for_each(|v| *v = uniform(rng, -0.2, 0.2));
                }
            }
            let alpha = random_map(rng, cfg.height, cfg.width, cfg.alpha_channels);
            let beta = random_map(rng, cfg.height, cfg.width, cfg.beta_channels);
            if clear_of_kinks(&params.head.group, &params.fuse(&alpha, &beta)?)? {
                drawn = Some((params, alpha, beta));
                break;
            }
        }
        let (params, alpha, beta) = drawn.ok_or_else(redraw_error)?;
        let target = rng::uniform_below(rng, cfg.classes as u64) as usize;
        let (_, grads) = params.backward(&alpha, &beta, target)?;
        let analytic: Vec<f64> = grads.tensors().iter().flat_map(|t| t.values.to_vec()).collect();
        let flat: Vec<f64> = params.head.tensors().iter().flat_map(|t| t.values.to_vec()).collect();
        let mut probe = params.clone();
        let numeric = central_differences(&flat, FD_STEP, |d| {
            let mut offset = 0;
            for t in probe.head.tensors_mut() {
                let n = t.values.len();
                t.values.copy_from_slice(&d[offset..offset + n]);
                offset += n;
            }
            probe.loss(&alpha, &beta, target).unwrap()
        });
        Ok(max_relative_error(&analytic, &numeric))
    })
}

/// Runs every gradient suite with `instances` random instances per layer
/// (tensor-sketch gets at least 50).
pub fn gradient_suite(seed: u64, instances: usize) -> Result<Vec<GradCheck>> {
    Ok(vec![
        check_conv3x3(seed, instances)?,
        check_relu(seed, instances)?,
        check_residual_block(seed, instances)?,
        check_residual_group(seed, instances)?,
        check_attention_pool(seed, instances)?,
        check_l2_normalize(seed, instances)?,
        check_spatial_average_pool(seed, instances)?,
        check_fully_connected(seed, instances)?,
        check_softmax_cross_entropy(seed, instances)?,
        check_tensor_sketch(seed, instances.max(50))?,
        check_model(seed, instances)?,
    ])
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EquivalenceReport {
    pub trials: usize,
    pub n: usize,
    pub d: usize,
    pub max_deviation: f64,
    pub tolerance: f64,
    pub worst_seed: u64,
}

impl EquivalenceReport {
    pub fn passed(&self) -> bool {
        self.max_deviation <= self.tolerance
    }
}

/// FFT tensor sketch versus the explicit outer-product oracle on `trials`
/// random `(a, b)` pairs of length `n` with fresh params per trial.
pub fn sketch_equivalence(n: usize, d: usize, trials: usize, seed: u64) -> Result<EquivalenceReport> {
    let mut worst = (0.0f64, seed);
    for t in 0..trials {
        let s = rng::derive_seed(seed, "equivalence", t as u64);
        let mut r = rng::seeded(s);
        let p1 = make_sketch_params(r.next_u64(), n, d)?;
        let p2 = make_sketch_params(r.next_u64(), n, d)?;
        let a = random_vec(&mut r, n);
        let b = random_vec(&mut r, n);
        let fast = TensorSketch::new(p1.clone(), p2.clone())?.forward(&a, &b)?;
        let slow = bilinear_oracle_sketch(&a, &b, &p1, &p2)?;
        let dev = fast.iter().zip(&slow).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        if dev > worst.0 {
            worst = (dev, s);
        }
    }
    Ok(EquivalenceReport {
        trials,
        n,
        d,
        max_deviation: worst.0,
        tolerance: SKETCH_EQUIVALENCE_TOLERANCE,
        worst_seed: worst.1,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UnbiasednessReport {
    pub trials: usize,
    pub n: usize,
    pub d: usize,
    pub exact: f64,
    pub mean: f64,
    /// standard error of the sample mean; `None` for a single trial
    pub std_error: Option<f64>,
    /// `|mean - exact|` in standard errors
    pub z_score: Option<f64>,
    pub seed: u64,
}

impl UnbiasednessReport {
    /// Within three standard errors. `None` when there are too few trials
    /// to assert anything.
    pub fn passed(&self) -> Option<bool> {
        self.z_score.map(|z| z <= 3.0)
    }
}

pub type SketchFn = fn(&[f64], &SketchParams) -> Result<Vec<f64>>;

/// Mean over `trials` independent sketches of `<sketch(x), sketch(y)>`,
/// compared to `<x, y>`. `x` and `y` are fixed draws from U[0, 1), so their
/// cross terms do not cancel and a sign-free sketch is visibly biased.
pub fn sketch_unbiasedness_with(
    n: usize,
    d: usize,
    trials: usize,
    seed: u64,
    sketch: SketchFn,
) -> Result<UnbiasednessReport> {
    let mut r = rng::seeded(rng::derive_seed(seed, "unbiased-data", 0));
    let x: Vec<f64> = (0..n).map(|_| rng::unit_f64(&mut r)).collect();
    let y: Vec<f64> = (0..n).map(|_| rng::unit_f64(&mut r)).collect();
    let exact = dot(&x, &y);
    let mut values = Vec::with_capacity(trials);
    for t in 0..trials {
        let p = make_sketch_params(rng::derive_seed(seed, "unbiased-params", t as u64), n, d)?;
        values.push(dot(&sketch(&x, &p)?, &sketch(&y, &p)?));
    }
    let mean = values.iter().sum::<f64>() / trials.max(1) as f64;
    let (std_error, z_score) = if trials >= 2 {
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (trials - 1) as f64;
        let se = (var / trials as f64).sqrt();
        (Some(se), Some((mean - exact).abs() / se))
    } else {
        (None, None)
    };
    Ok(UnbiasednessReport {
        trials,
        n,
        d,
        exact,
        mean,
        std_error,
        z_score,
        seed,
    })
}

pub fn sketch_unbiasedness(n: usize, d: usize, trials: usize, seed: u64) -> Result<UnbiasednessReport> {
    sketch_unbiasedness_with(n, d, trials, seed, count_sketch)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_differences_of_quadratic() {
        let g = central_differences(&[1.0, -2.0], 1e-5, |x| x[0] * x[0] + 3.0 * x[1]);
        assert!((g[0] - 2.0).abs() < 1e-8);
        assert!((g[1] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!(relative_error(1e-12, 0.0) < 1e-5);
    }

    #[test]
    fn single_trial_has_no_verdict() {
        let r = sketch_unbiasedness(16, 8, 1, 0).unwrap();
        assert_eq!(r.passed(), None);
        assert!(r.mean.is_finite());
    }
}
