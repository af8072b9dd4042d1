//! The full classification head.
//!
//! ```text
//! alpha (H x W x C1) --+--> per-location tensor sketch --> H x W x d
//!                      |        --> residual group --> average pool --> l2 --> z
//! beta  (H x W x C2) --+
//! alpha --> attention pool --> a1 (C1)
//! beta  --> attention pool --> a2 (C2)
//! logits = FC(concat(z, a1, a2))
//! ```
//!
//! Sketch projections are fixed at init and never receive gradients; only
//! [`HeadWeights`] are trainable.

use std::path::Path;

use rand::RngCore;

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::layers::{
    l2_normalize, l2_normalize_backward, softmax, softmax_cross_entropy, softmax_cross_entropy_backward,
    spatial_average_pool, spatial_average_pool_backward, AttentionMap, AttentionPool, BlockCache, Conv3x3, FeatureMap,
    Linear, ResidualGroup,
};
use crate::rng::{self, GENERATOR_CHACHA8};
use crate::sketch::{SketchParams, TensorSketch};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub alpha_channels: usize,
    pub beta_channels: usize,
    pub sketch_dim: usize,
    pub blocks: usize,
    pub classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            height: 14,
            width: 14,
            alpha_channels: 2048,
            beta_channels: 2048,
            sketch_dim: 2048,
            blocks: 4,
            classes: 100,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.height,
            self.width,
            self.alpha_channels,
            self.beta_channels,
            self.sketch_dim,
            self.blocks,
        ];
        if dims.contains(&0) {
            return Err(Error::InvalidArgument(format!("model dims must be positive: {self:?}")));
        }
        if self.classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 classes, got {}",
                self.classes
            )));
        }
        Ok(())
    }

    /// Input width of the final fully-connected layer.
    pub fn fc_inputs(&self) -> usize {
        self.sketch_dim + self.alpha_channels + self.beta_channels
    }
}

/// Trainable weights. Also used as the container for their gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    pub group: ResidualGroup,
    pub attn_alpha: AttentionPool,
    pub attn_beta: AttentionPool,
    pub fc: Linear,
}

/// One trainable tensor, as seen by the optimizer and the checkpoint writer.
pub struct TensorView<'a> {
    pub dims: Vec<usize>,
    pub values: &'a [f64],
    pub is_bias: bool,
}

pub struct TensorViewMut<'a> {
    pub values: &'a mut [f64],
    pub is_bias: bool,
}

fn conv_views(conv: &Conv3x3) -> [TensorView<'_>; 2] {
    [
        TensorView {
            dims: vec![conv.out_channels, conv.in_channels, 3, 3],
            values: &conv.weight,
            is_bias: false,
        },
        TensorView {
            dims: vec![conv.out_channels],
            values: &conv.bias,
            is_bias: true,
        },
    ]
}

fn conv_views_mut(conv: &mut Conv3x3) -> [TensorViewMut<'_>; 2] {
    [
        TensorViewMut {
            values: &mut conv.weight,
            is_bias: false,
        },
        TensorViewMut {
            values: &mut conv.bias,
            is_bias: true,
        },
    ]
}

impl HeadWeights {
    pub fn zeros(config: &ModelConfig) -> Self {
        HeadWeights {
            group: ResidualGroup::zeros(config.sketch_dim, config.blocks),
            attn_alpha: AttentionPool::zeros(config.alpha_channels),
            attn_beta: AttentionPool::zeros(config.beta_channels),
            fc: Linear::zeros(config.fc_inputs(), config.classes),
        }
    }

    /// Tensors in checkpoint order: per block (conv1 weight, conv1 bias,
    /// conv2 weight, conv2 bias), then alpha attention, beta attention, FC.
    pub fn tensors(&self) -> Vec<TensorView<'_>> {
        let mut out = Vec::new();
        for block in &self.group.blocks {
            out.extend(conv_views(&block.conv1));
            out.extend(conv_views(&block.conv2));
        }
        out.extend(conv_views(&self.attn_alpha.score));
        out.extend(conv_views(&self.attn_beta.score));
        out.push(TensorView {
            dims: vec![self.fc.out_dim, self.fc.in_dim],
            values: &self.fc.weight,
            is_bias: false,
        });
        out.push(TensorView {
            dims: vec![self.fc.out_dim],
            values: &self.fc.bias,
            is_bias: true,
        });
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<TensorViewMut<'_>> {
        let mut out = Vec::new();
        for block in &mut self.group.blocks {
            out.extend(conv_views_mut(&mut block.conv1));
            out.extend(conv_views_mut(&mut block.conv2));
        }
        out.extend(conv_views_mut(&mut self.attn_alpha.score));
        out.extend(conv_views_mut(&mut self.attn_beta.score));
        out.push(TensorViewMut {
            values: &mut self.fc.weight,
            is_bias: false,
        });
        out.push(TensorViewMut {
            values: &mut self.fc.bias,
            is_bias: true,
        });
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.values.len()).sum()
    }

    /// `self += scale * other`. Shapes must agree.
    pub fn add_scaled(&mut self, other: &HeadWeights, scale: f64) -> Result<()> {
        let theirs = other.tensors();
        let mut mine = self.tensors_mut();
        if mine.len() != theirs.len() {
            return Err(Error::ShapeMismatch(format!(
                "tensor count {} vs {}",
                mine.len(),
                theirs.len()
            )));
        }
        for (i, (m, t)) in mine.iter_mut().zip(&theirs).enumerate() {
            if m.values.len() != t.values.len() {
                return Err(Error::ShapeMismatch(format!(
                    "tensor {i}: {} vs {} elements",
                    m.values.len(),
                    t.values.len()
                )));
            }
            for (a, b) in m.values.iter_mut().zip(t.values) {
                *a += scale * b;
            }
        }
        Ok(())
    }
}

/// Everything `forward` produces.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Vec<f64>,
    /// l2-normalized fused vector (length d)
    pub z: Vec<f64>,
    pub pooled_alpha: Vec<f64>,
    pub pooled_beta: Vec<f64>,
    pub attn_alpha: AttentionMap,
    pub attn_beta: AttentionMap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub class: usize,
    pub probabilities: Vec<f64>,
}

/// Intermediate activations needed by [`ModelParams::backward`].
struct Trace {
    block_caches: Vec<BlockCache>,
    unnormalized: Vec<f64>,
    features: Vec<f64>,
    output: ForwardOutput,
}

#[derive(Debug, Clone)]
pub struct ModelParams {
    config: ModelConfig,
    sketch: TensorSketch,
    pub head: HeadWeights,
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn fill_uniform(rng: &mut impl RngCore, values: &mut [f64], bound: f64) {
    for v in values {
        *v = (2.0 * rng::unit_f64(rng) - 1.0) * bound;
    }
}

impl ModelParams {
    /// Fan-in uniform weights (`bound = sqrt(1 / fan_in)`), zero biases,
    /// sketch projections drawn from seeds derived from `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let sketch_seeds = (
            rng::derive_seed(seed, "sketch-alpha", 0),
            rng::derive_seed(seed, "sketch-beta", 0),
        );
        let mut params = Self::zeroed(config, sketch_seeds)?;
        let mut rng = rng::seeded(rng::derive_seed(seed, "init", 0));
        let head = &mut params.head;
        for block in &mut head.group.blocks {
            for conv in [&mut block.conv1, &mut block.conv2] {
                let bound = (1.0 / conv.fan_in() as f64).sqrt();
                fill_uniform(&mut rng, &mut conv.weight, bound);
            }
        }
        for attn in [&mut head.attn_alpha, &mut head.attn_beta] {
            let bound = (1.0 / attn.score.fan_in() as f64).sqrt();
            fill_uniform(&mut rng, &mut attn.score.weight, bound);
        }
        let bound = (1.0 / head.fc.in_dim as f64).sqrt();
        fill_uniform(&mut rng, &mut head.fc.weight, bound);
        Ok(params)
    }

    /// All trainable weights zero; sketches from the given seeds.
    pub fn zeroed(config: ModelConfig, sketch_seeds: (u64, u64)) -> Result<Self> {
        config.validate()?;
        let p1 = SketchParams::generate(sketch_seeds.0, config.alpha_channels, config.sketch_dim)?;
        let p2 = SketchParams::generate(sketch_seeds.1, config.beta_channels, config.sketch_dim)?;
        Ok(ModelParams {
            config,
            sketch: TensorSketch::new(p1, p2)?,
            head: HeadWeights::zeros(&config),
        })
    }

    /// Replaces the trainable weights, checking their shapes against the config.
    pub fn with_head(mut self, head: HeadWeights) -> Result<Self> {
        let expected = HeadWeights::zeros(&self.config);
        let want: Vec<Vec<usize>> = expected.tensors().into_iter().map(|t| t.dims).collect();
        let got: Vec<Vec<usize>> = head.tensors().into_iter().map(|t| t.dims).collect();
        if want != got {
            return Err(Error::ShapeMismatch(format!(
                "head tensor shapes {got:?} do not match config {want:?}"
            )));
        }
        self.head = head;
        Ok(self)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn sketch(&self) -> &TensorSketch {
        &self.sketch
    }

    pub fn sketch_seeds(&self) -> (u64, u64) {
        (self.sketch.first().seed(), self.sketch.second().seed())
    }

    fn check_inputs(&self, alpha: &FeatureMap, beta: &FeatureMap) -> Result<()> {
        let c = &self.config;
        let want_a = (c.height, c.width, c.alpha_channels);
        let want_b = (c.height, c.width, c.beta_channels);
        if alpha.shape() != want_a || beta.shape() != want_b {
            return Err(Error::ShapeMismatch(format!(
                "inputs alpha {:?} / beta {:?}, model expects {:?} / {:?}",
                alpha.shape(),
                beta.shape(),
                want_a,
                want_b
            )));
        }
        Ok(())
    }

    /// Per-location tensor sketch of the two maps: an H x W x d grid.
    pub fn fuse(&self, alpha: &FeatureMap, beta: &FeatureMap) -> Result<FeatureMap> {
        if alpha.height() != beta.height() || alpha.width() != beta.width() {
            return Err(Error::ShapeMismatch(format!(
                "spatial dims differ: alpha {:?}, beta {:?}",
                alpha.shape(),
                beta.shape()
            )));
        }
        let d = self.sketch.output_dim();
        let mut fused = FeatureMap::zeros(alpha.height(), alpha.width(), d);
        for h in 0..alpha.height() {
            for w in 0..alpha.width() {
                let z = self.sketch.forward(alpha.pixel(h, w), beta.pixel(h, w))?;
                fused.pixel_mut(h, w).copy_from_slice(&z);
            }
        }
        Ok(fused)
    }

    fn trace(&self, alpha: &FeatureMap, beta: &FeatureMap) -> Result<Trace> {
        self.check_inputs(alpha, beta)?;
        let fused = self.fuse(alpha, beta)?;
        let (grouped, block_caches) = self.head.group.forward_cached(&fused)?;
        let unnormalized = spatial_average_pool(&grouped);
        let z = l2_normalize(&unnormalized);
        let (pooled_alpha, attn_alpha) = self.head.attn_alpha.forward(alpha)?;
        let (pooled_beta, attn_beta) = self.head.attn_beta.forward(beta)?;
        let mut features = Vec::with_capacity(self.config.fc_inputs());
        features.extend_from_slice(&z);
        features.extend_from_slice(&pooled_alpha);
        features.extend_from_slice(&pooled_beta);
        let logits = self.head.fc.forward(&features)?;
        Ok(Trace {
            block_caches,
            unnormalized,
            features,
            output: ForwardOutput {
                logits,
                z,
                pooled_alpha,
                pooled_beta,
                attn_alpha,
                attn_beta,
            },
        })
    }

    pub fn forward(&self, alpha: &FeatureMap, beta: &FeatureMap) -> Result<ForwardOutput> {
        Ok(self.trace(alpha, beta)?.output)
    }

    pub fn predict(&self, alpha: &FeatureMap, beta: &FeatureMap) -> Result<Prediction> {
        let out = self.forward(alpha, beta)?;
        let probabilities = softmax(&out.logits);
        Ok(Prediction {
            class: argmax(&probabilities),
            probabilities,
        })
    }

    /// Cross-entropy loss for one sample.
    pub fn loss(&self, alpha: &FeatureMap, beta: &FeatureMap, target: usize) -> Result<f64> {
        let out = self.forward(alpha, beta)?;
        Ok(softmax_cross_entropy(&out.logits, target)?.0)
    }

    /// Loss and its gradient with respect to every trainable weight.
    pub fn backward(&self, alpha: &FeatureMap, beta: &FeatureMap, target: usize) -> Result<(f64, HeadWeights)> {
        let trace = self.trace(alpha, beta)?;
        let (loss, probs) = softmax_cross_entropy(&trace.output.logits, target)?;
        let g_logits = softmax_cross_entropy_backward(&probs, target);
        let (g_features, g_fc) = self.head.fc.backward(&trace.features, &g_logits)?;

        let d = self.config.sketch_dim;
        let c1 = self.config.alpha_channels;
        let (g_z, rest) = g_features.split_at(d);
        let (g_a1, g_a2) = rest.split_at(c1);

        let (_, g_attn_alpha) = self.head.attn_alpha.backward(alpha, &trace.output.attn_alpha, g_a1)?;
        let (_, g_attn_beta) = self.head.attn_beta.backward(beta, &trace.output.attn_beta, g_a2)?;

        let g_unnorm = l2_normalize_backward(&trace.unnormalized, g_z)?;
        let g_grouped = spatial_average_pool_backward(self.config.height, self.config.width, &g_unnorm);
        let (_, g_group) = self.head.group.backward(&trace.block_caches, &g_grouped)?;

        Ok((
            loss,
            HeadWeights {
                group: g_group,
                attn_alpha: g_attn_alpha,
                attn_beta: g_attn_beta,
                fc: g_fc,
            },
        ))
    }
}

// ---------------------------------------------------------------------------
// Checkpoint format (all integers little-endian):
//
//   "CNMD" | u16 version = 1
//   u32 x 7: H, W, C1, C2, d, blocks, K
//   u64 sketch seed (alpha), u64 sketch seed (beta), u32 generator id
//   per tensor, in HeadWeights::tensors() order:
//     u32 rank | u32 x rank dims | f64 x prod(dims)
//
// Nothing follows the last tensor.

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CNMD";
pub const CHECKPOINT_VERSION: u16 = 1;

pub fn encode_checkpoint(params: &ModelParams) -> Vec<u8> {
    let c = &params.config;
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for v in [
        c.height,
        c.width,
        c.alpha_channels,
        c.beta_channels,
        c.sketch_dim,
        c.blocks,
        c.classes,
    ] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    let (s1, s2) = params.sketch_seeds();
    buf.extend_from_slice(&s1.to_le_bytes());
    buf.extend_from_slice(&s2.to_le_bytes());
    buf.extend_from_slice(&GENERATOR_CHACHA8.to_le_bytes());
    for t in params.head.tensors() {
        buf.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
        for &dim in &t.dims {
            buf.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for v in t.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail(&self, offset: usize, message: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: offset as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(
                self.pos,
                format!(
                    "truncated while reading {what}: need {n} bytes, {} remain",
                    self.bytes.len() - self.pos
                ),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(path: &Path, bytes: &[u8]) -> Result<ModelParams> {
    let mut r = Reader { path, bytes, pos: 0 };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(r.fail(0, "bad magic, expected \"CNMD\""));
    }
    let version = r.u16("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(r.fail(4, format!("unsupported version {version}")));
    }
    let mut dims = [0usize; 7];
    for v in dims.iter_mut() {
        *v = r.u32("config")? as usize;
    }
    let config = ModelConfig {
        height: dims[0],
        width: dims[1],
        alpha_channels: dims[2],
        beta_channels: dims[3],
        sketch_dim: dims[4],
        blocks: dims[5],
        classes: dims[6],
    };
    config.validate().map_err(|e| r.fail(6, e.to_string()))?;
    let s1 = r.u64("sketch seed")?;
    let s2 = r.u64("sketch seed")?;
    let gen_offset = r.pos;
    let generator = r.u32("generator id")?;
    if generator != GENERATOR_CHACHA8 {
        return Err(r.fail(gen_offset, format!("unknown sketch generator id {generator}")));
    }
    let mut params = ModelParams::zeroed(config, (s1, s2))?;
    for (index, t) in params.head.tensors_mut().into_iter().enumerate() {
        let _ = t.is_bias;
        let start = r.pos;
        let rank = r.u32("tensor rank")? as usize;
        if rank > 4 {
            return Err(r.fail(start, format!("tensor {index}: implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("tensor dims")? as usize);
        }
        let count: usize = shape.iter().product();
        if count != t.values.len() {
            return Err(r.fail(
                start,
                format!(
                    "tensor {index}: shape {shape:?} holds {count} values, config requires {}",
                    t.values.len()
                ),
            ));
        }
        let raw = r.take(count * 8, "tensor values")?;
        for (v, chunk) in t.values.iter_mut().zip(raw.chunks_exact(8)) {
            *v = f64::from_le_bytes(chunk.try_into().unwrap());
        }
    }
    if r.pos != bytes.len() {
        return Err(r.fail(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(params)
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    write_atomic(path, &encode_checkpoint(params))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(path, &bytes)
}

/// Loads a checkpoint and rejects it unless its config equals `expected`.
pub fn load_checkpoint_expecting(path: &Path, expected: &ModelConfig) -> Result<ModelParams> {
    let params = load_checkpoint(path)?;
    if params.config() != expected {
        return Err(Error::ShapeMismatch(format!(
            "checkpoint config {:?} does not match expected {:?}",
            params.config(),
            expected
        )));
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
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

    #[test]
    fn init_is_deterministic() {
        let a = ModelParams::init(tiny(), 5).unwrap();
        let b = ModelParams::init(tiny(), 5).unwrap();
        assert_eq!(a.head, b.head);
        assert_eq!(a.sketch_seeds(), b.sketch_seeds());
        let c = ModelParams::init(tiny(), 6).unwrap();
        assert_ne!(a.head, c.head);
    }

    #[test]
    fn init_biases_are_zero() {
        let p = ModelParams::init(tiny(), 1).unwrap();
        for t in p.head.tensors() {
            if t.is_bias {
                assert!(t.values.iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn init_rejects_bad_config() {
        let mut c = tiny();
        c.classes = 1;
        assert!(ModelParams::init(c, 0).is_err());
        c = tiny();
        c.sketch_dim = 0;
        assert!(ModelParams::init(c, 0).is_err());
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.1, 5.0, 0.3]), 1);
        assert_eq!(argmax(&[1.0, 1.0]), 0);
        assert_eq!(argmax(&[0.0, 2.0, 2.0]), 1);
    }

    #[test]
    fn forward_rejects_spatial_mismatch() {
        let p = ModelParams::init(tiny(), 1).unwrap();
        let a = FeatureMap::zeros(2, 2, 3);
        let b = FeatureMap::zeros(3, 2, 3);
        assert!(p.forward(&a, &b).is_err());
        assert!(p.fuse(&a, &b).is_err());
    }

    #[test]
    fn zero_everything_gives_uniform_prediction() {
        let p = ModelParams::zeroed(tiny(), (1, 2)).unwrap();
        let a = FeatureMap::zeros(2, 2, 3);
        let out = p.forward(&a, &a).unwrap();
        assert_eq!(out.logits, vec![0.0; 3]);
        let pred = p.predict(&a, &a).unwrap();
        assert_eq!(pred.class, 0);
        for q in pred.probabilities {
            assert!((q - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let p = ModelParams::init(tiny(), 3).unwrap();
        let bytes = encode_checkpoint(&p);
        let path = Path::new("mem");
        assert_eq!(decode_checkpoint(path, &bytes).unwrap().head, p.head);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            decode_checkpoint(path, &bad),
            Err(Error::Format { offset: 0, .. })
        ));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(
            decode_checkpoint(path, &bad),
            Err(Error::Format { offset: 4, .. })
        ));
        let err = decode_checkpoint(path, &bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
        let mut long = bytes.clone();
        long.push(0);
        assert!(decode_checkpoint(path, &long).is_err());
    }
}
