//! Differentiable building blocks of the classification head.
//!
//! Every layer has a forward pass and a hand-written backward pass. Backward
//! functions take the forward inputs plus the upstream gradient and return
//! gradients for inputs and parameters; parameter gradients are returned in
//! the same struct type as the parameters themselves.

use crate::error::{ensure_len, Error, Result};

/// Guard used by [`l2_normalize`] for (near-)zero inputs.
pub const L2_EPS: f64 = 1e-12;

/// An H x W x C grid stored row-major with channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::InvalidArgument(format!(
                "feature map dims must be positive, got {height}x{width}x{channels}"
            )));
        }
        ensure_len(height * width * channels, data.len())?;
        Ok(FeatureMap {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        assert!(height > 0 && width > 0 && channels > 0);
        FeatureMap {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut m = Self::zeros(height, width, channels);
        for h in 0..height {
            for w in 0..width {
                for c in 0..channels {
                    m.data[(h * width + w) * channels + c] = f(h, w, c);
                }
            }
        }
        m
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn positions(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, h: usize, w: usize, c: usize) -> f64 {
        self.data[(h * self.width + w) * self.channels + c]
    }

    pub fn set(&mut self, h: usize, w: usize, c: usize, v: f64) {
        self.data[(h * self.width + w) * self.channels + c] = v;
    }

    /// Channel vector at grid location `(h, w)`.
    pub fn pixel(&self, h: usize, w: usize) -> &[f64] {
        let start = (h * self.width + w) * self.channels;
        &self.data[start..start + self.channels]
    }

    pub fn pixel_mut(&mut self, h: usize, w: usize) -> &mut [f64] {
        let start = (h * self.width + w) * self.channels;
        &mut self.data[start..start + self.channels]
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v *= s);
        out
    }

    fn same_shape(&self, other: &FeatureMap) -> Result<()> {
        if self.shape() == other.shape() {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "{:?} vs {:?}",
                self.shape(),
                other.shape()
            )))
        }
    }

    fn add(&self, other: &FeatureMap) -> FeatureMap {
        let mut out = self.clone();
        for (a, b) in out.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        out
    }
}

/// 3x3 convolution, stride 1, zero padding 1.
///
/// `weight` is laid out `[out][in][kh][kw]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3x3 {
    pub in_channels: usize,
    pub out_channels: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv3x3 {
    pub fn zeros(in_channels: usize, out_channels: usize) -> Self {
        Conv3x3 {
            in_channels,
            out_channels,
            weight: vec![0.0; out_channels * in_channels * 9],
            bias: vec![0.0; out_channels],
        }
    }

    pub fn new(in_channels: usize, out_channels: usize, weight: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        ensure_len(out_channels * in_channels * 9, weight.len())?;
        ensure_len(out_channels, bias.len())?;
        Ok(Conv3x3 {
            in_channels,
            out_channels,
            weight,
            bias,
        })
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * 9
    }

    pub fn weight_index(&self, o: usize, c: usize, kh: usize, kw: usize) -> usize {
        ((o * self.in_channels + c) * 3 + kh) * 3 + kw
    }

    // [tap][in][out] so the innermost loop runs over contiguous output channels.
    fn tap_major(&self) -> Vec<f64> {
        let (ci, co) = (self.in_channels, self.out_channels);
        let mut t = vec![0.0; 9 * ci * co];
        for o in 0..co {
            for c in 0..ci {
                for tap in 0..9 {
                    t[(tap * ci + c) * co + o] = self.weight[(o * ci + c) * 9 + tap];
                }
            }
        }
        t
    }

    fn check_input(&self, input: &FeatureMap) -> Result<()> {
        if input.channels != self.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "conv3x3 expects {} input channels, got {}",
                self.in_channels, input.channels
            )));
        }
        Ok(())
    }

    pub fn forward(&self, input: &FeatureMap) -> Result<FeatureMap> {
        self.check_input(input)?;
        let (hh, ww, ci) = input.shape();
        let co = self.out_channels;
        let taps = self.tap_major();
        let mut out = FeatureMap::zeros(hh, ww, co);
        for h in 0..hh {
            for w in 0..ww {
                let acc = out.pixel_mut(h, w);
                acc.copy_from_slice(&self.bias);
                for kh in 0..3 {
                    let ih = h as isize + kh as isize - 1;
                    if ih < 0 || ih >= hh as isize {
                        continue;
                    }
                    for kw in 0..3 {
                        let iw = w as isize + kw as isize - 1;
                        if iw < 0 || iw >= ww as isize {
                            continue;
                        }
                        let px = input.pixel(ih as usize, iw as usize);
                        let tap = kh * 3 + kw;
                        for (c, &x) in px.iter().enumerate() {
                            if x == 0.0 {
                                continue;
                            }
                            let row = &taps[(tap * ci + c) * co..(tap * ci + c + 1) * co];
                            for (a, &k) in acc.iter_mut().zip(row) {
                                *a += x * k;
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Returns `(grad_input, grad_params)`.
    pub fn backward(&self, input: &FeatureMap, upstream: &FeatureMap) -> Result<(FeatureMap, Conv3x3)> {
        self.check_input(input)?;
        let (hh, ww, ci) = input.shape();
        let co = self.out_channels;
        if upstream.shape() != (hh, ww, co) {
            return Err(Error::ShapeMismatch(format!(
                "conv3x3 upstream {:?}, expected {:?}",
                upstream.shape(),
                (hh, ww, co)
            )));
        }
        let taps = self.tap_major();
        let mut grad_taps = vec![0.0; taps.len()];
        let mut grad_in = FeatureMap::zeros(hh, ww, ci);
        let mut grad = Conv3x3::zeros(ci, co);
        for h in 0..hh {
            for w in 0..ww {
                let up = upstream.pixel(h, w);
                for (b, &u) in grad.bias.iter_mut().zip(up) {
                    *b += u;
                }
                for kh in 0..3 {
                    let ih = h as isize + kh as isize - 1;
                    if ih < 0 || ih >= hh as isize {
                        continue;
                    }
                    for kw in 0..3 {
                        let iw = w as isize + kw as isize - 1;
                        if iw < 0 || iw >= ww as isize {
                            continue;
                        }
                        let tap = kh * 3 + kw;
                        let (ih, iw) = (ih as usize, iw as usize);
                        let px = input.pixel(ih, iw);
                        let gpx = grad_in.pixel_mut(ih, iw);
                        for c in 0..ci {
                            let range = (tap * ci + c) * co..(tap * ci + c + 1) * co;
                            let row = &taps[range.clone()];
                            gpx[c] += row.iter().zip(up).map(|(k, u)| k * u).sum::<f64>();
                            let x = px[c];
                            if x != 0.0 {
                                for (g, &u) in grad_taps[range].iter_mut().zip(up) {
                                    *g += x * u;
                                }
                            }
                        }
                    }
                }
            }
        }
        for o in 0..co {
            for c in 0..ci {
                for tap in 0..9 {
                    grad.weight[(o * ci + c) * 9 + tap] = grad_taps[(tap * ci + c) * co + o];
                }
            }
        }
        Ok((grad_in, grad))
    }
}

pub fn relu(input: &FeatureMap) -> FeatureMap {
    let mut out = input.clone();
    out.data.iter_mut().for_each(|v| *v = v.max(0.0));
    out
}

/// Upstream masked where the forward input was `<= 0`.
pub fn relu_backward(input: &FeatureMap, upstream: &FeatureMap) -> Result<FeatureMap> {
    input.same_shape(upstream)?;
    let mut out = upstream.clone();
    for (g, &x) in out.data.iter_mut().zip(&input.data) {
        if x <= 0.0 {
            *g = 0.0;
        }
    }
    Ok(out)
}

/// `out = relu(x + conv2(relu(conv1(x))))`. Both convolutions keep the channel count.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock {
    pub conv1: Conv3x3,
    pub conv2: Conv3x3,
}

/// Activations retained from [`ResidualBlock::forward_cached`].
#[derive(Debug, Clone)]
pub struct BlockCache {
    input: FeatureMap,
    pre1: FeatureMap,
    act1: FeatureMap,
    pre_out: FeatureMap,
}

impl BlockCache {
    /// Smallest |pre-activation| over both ReLUs of the block.
    pub fn relu_margin(&self) -> f64 {
        self.pre1
            .data()
            .iter()
            .chain(self.pre_out.data())
            .fold(f64::INFINITY, |m, v| m.min(v.abs()))
    }
}

impl ResidualBlock {
    pub fn new(conv1: Conv3x3, conv2: Conv3x3) -> Result<Self> {
        let c = conv1.in_channels;
        if conv1.out_channels != c || conv2.in_channels != c || conv2.out_channels != c {
            return Err(Error::ShapeMismatch(format!(
                "residual block must preserve channels: conv1 {}->{}, conv2 {}->{}",
                conv1.in_channels, conv1.out_channels, conv2.in_channels, conv2.out_channels
            )));
        }
        Ok(ResidualBlock { conv1, conv2 })
    }

    pub fn zeros(channels: usize) -> Self {
        ResidualBlock {
            conv1: Conv3x3::zeros(channels, channels),
            conv2: Conv3x3::zeros(channels, channels),
        }
    }

    pub fn channels(&self) -> usize {
        self.conv1.in_channels
    }

    pub fn forward(&self, input: &FeatureMap) -> Result<FeatureMap> {
        Ok(self.forward_cached(input)?.0)
    }

    pub fn forward_cached(&self, input: &FeatureMap) -> Result<(FeatureMap, BlockCache)> {
        let pre1 = self.conv1.forward(input)?;
        let act1 = relu(&pre1);
        let branch = self.conv2.forward(&act1)?;
        if branch.shape() != input.shape() {
            return Err(Error::ShapeMismatch(format!(
                "residual branch {:?} does not match input {:?}",
                branch.shape(),
                input.shape()
            )));
        }
        let pre_out = input.add(&branch);
        let out = relu(&pre_out);
        Ok((
            out,
            BlockCache {
                input: input.clone(),
                pre1,
                act1,
                pre_out,
            },
        ))
    }

    pub fn backward(&self, cache: &BlockCache, upstream: &FeatureMap) -> Result<(FeatureMap, ResidualBlock)> {
        let g_pre_out = relu_backward(&cache.pre_out, upstream)?;
        let (g_act1, g_conv2) = self.conv2.backward(&cache.act1, &g_pre_out)?;
        let g_pre1 = relu_backward(&cache.pre1, &g_act1)?;
        let (g_input_branch, g_conv1) = self.conv1.backward(&cache.input, &g_pre1)?;
        let grad_input = g_pre_out.add(&g_input_branch);
        Ok((
            grad_input,
            ResidualBlock {
                conv1: g_conv1,
                conv2: g_conv2,
            },
        ))
    }
}

/// Sequential residual blocks (four by default in the model).
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualGroup {
    pub blocks: Vec<ResidualBlock>,
}

impl ResidualGroup {
    pub fn zeros(channels: usize, blocks: usize) -> Self {
        ResidualGroup {
            blocks: (0..blocks).map(|_| ResidualBlock::zeros(channels)).collect(),
        }
    }

    pub fn forward(&self, input: &FeatureMap) -> Result<FeatureMap> {
        Ok(self.forward_cached(input)?.0)
    }

    pub fn forward_cached(&self, input: &FeatureMap) -> Result<(FeatureMap, Vec<BlockCache>)> {
        let mut x = input.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, cache) = block.forward_cached(&x)?;
            caches.push(cache);
            x = y;
        }
        Ok((x, caches))
    }

    pub fn backward(&self, caches: &[BlockCache], upstream: &FeatureMap) -> Result<(FeatureMap, ResidualGroup)> {
        ensure_len(self.blocks.len(), caches.len())?;
        let mut g = upstream.clone();
        let mut grads = Vec::with_capacity(self.blocks.len());
        for (block, cache) in self.blocks.iter().zip(caches).rev() {
            let (gi, gb) = block.backward(cache, &g)?;
            grads.push(gb);
            g = gi;
        }
        grads.reverse();
        Ok((g, ResidualGroup { blocks: grads }))
    }
}

/// Softmax weights over all H*W grid positions.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub height: usize,
    pub width: usize,
    pub weights: Vec<f64>,
}

impl AttentionMap {
    pub fn get(&self, h: usize, w: usize) -> f64 {
        self.weights[h * self.width + w]
    }
}

/// Numerically stable softmax (max subtracted).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Soft attention pooling: a 3x3 convolution scores every location, a
/// softmax over the grid turns scores into weights, and the output is the
/// attention-weighted sum of the channel vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionPool {
    pub score: Conv3x3,
}

impl AttentionPool {
    pub fn new(score: Conv3x3) -> Result<Self> {
        if score.out_channels != 1 {
            return Err(Error::ShapeMismatch(format!(
                "attention score conv must emit 1 channel, got {}",
                score.out_channels
            )));
        }
        Ok(AttentionPool { score })
    }

    pub fn zeros(channels: usize) -> Self {
        AttentionPool {
            score: Conv3x3::zeros(channels, 1),
        }
    }

    pub fn channels(&self) -> usize {
        self.score.in_channels
    }

    pub fn forward(&self, features: &FeatureMap) -> Result<(Vec<f64>, AttentionMap)> {
        let scores = self.score.forward(features)?;
        let weights = softmax(scores.data());
        let mut pooled = vec![0.0; features.channels];
        for (p, &a) in weights.iter().enumerate() {
            let px = &features.data[p * features.channels..(p + 1) * features.channels];
            for (o, &x) in pooled.iter_mut().zip(px) {
                *o += a * x;
            }
        }
        Ok((
            pooled,
            AttentionMap {
                height: features.height,
                width: features.width,
                weights,
            },
        ))
    }

    /// Returns `(grad_features, grad_params)` for upstream gradient on the pooled vector.
    pub fn backward(
        &self,
        features: &FeatureMap,
        attn: &AttentionMap,
        upstream: &[f64],
    ) -> Result<(FeatureMap, AttentionPool)> {
        let c = features.channels;
        ensure_len(c, upstream.len())?;
        ensure_len(features.positions(), attn.weights.len())?;
        let mut grad_features = FeatureMap::zeros(features.height, features.width, c);
        let dweights: Vec<f64> = (0..features.positions())
            .map(|p| {
                let px = &features.data[p * c..(p + 1) * c];
                px.iter().zip(upstream).map(|(x, g)| x * g).sum()
            })
            .collect();
        let mean: f64 = attn.weights.iter().zip(&dweights).map(|(a, d)| a * d).sum();
        let dscores: Vec<f64> = attn
            .weights
            .iter()
            .zip(&dweights)
            .map(|(a, d)| a * (d - mean))
            .collect();
        for (p, &a) in attn.weights.iter().enumerate() {
            let gpx = &mut grad_features.data[p * c..(p + 1) * c];
            for (g, &u) in gpx.iter_mut().zip(upstream) {
                *g = a * u;
            }
        }
        let dscore_map = FeatureMap::new(features.height, features.width, 1, dscores)?;
        let (g_from_scores, g_score) = self.score.backward(features, &dscore_map)?;
        for (g, s) in grad_features.data.iter_mut().zip(&g_from_scores.data) {
            *g += s;
        }
        Ok((grad_features, AttentionPool { score: g_score }))
    }
}

/// `x / ||x||`, or the zero vector when `||x|| <= L2_EPS`.
pub fn l2_normalize(x: &[f64]) -> Vec<f64> {
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm <= L2_EPS {
        return vec![0.0; x.len()];
    }
    x.iter().map(|v| v / norm).collect()
}

pub fn l2_normalize_backward(x: &[f64], upstream: &[f64]) -> Result<Vec<f64>> {
    ensure_len(x.len(), upstream.len())?;
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm <= L2_EPS {
        return Ok(vec![0.0; x.len()]);
    }
    let y: Vec<f64> = x.iter().map(|v| v / norm).collect();
    let yg: f64 = y.iter().zip(upstream).map(|(a, b)| a * b).sum();
    Ok(upstream.iter().zip(&y).map(|(g, yi)| (g - yi * yg) / norm).collect())
}

pub fn spatial_average_pool(input: &FeatureMap) -> Vec<f64> {
    let c = input.channels;
    let mut out = vec![0.0; c];
    for px in input.data.chunks_exact(c) {
        for (o, &x) in out.iter_mut().zip(px) {
            *o += x;
        }
    }
    let scale = 1.0 / input.positions() as f64;
    out.iter_mut().for_each(|v| *v *= scale);
    out
}

pub fn spatial_average_pool_backward(height: usize, width: usize, upstream: &[f64]) -> FeatureMap {
    let c = upstream.len();
    let scale = 1.0 / (height * width) as f64;
    let mut g = FeatureMap::zeros(height, width, c);
    for px in g.data.chunks_exact_mut(c) {
        for (o, &u) in px.iter_mut().zip(upstream) {
            *o = u * scale;
        }
    }
    g
}

/// `out = W x + b` with `W` stored row-major, `out_dim x in_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Linear {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    pub fn new(in_dim: usize, out_dim: usize, weight: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        ensure_len(in_dim * out_dim, weight.len())?;
        ensure_len(out_dim, bias.len())?;
        Ok(Linear {
            in_dim,
            out_dim,
            weight,
            bias,
        })
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        ensure_len(self.in_dim, x.len())?;
        Ok(self
            .weight
            .chunks_exact(self.in_dim)
            .zip(&self.bias)
            .map(|(row, b)| b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
            .collect())
    }

    pub fn backward(&self, x: &[f64], upstream: &[f64]) -> Result<(Vec<f64>, Linear)> {
        ensure_len(self.in_dim, x.len())?;
        ensure_len(self.out_dim, upstream.len())?;
        let mut grad_x = vec![0.0; self.in_dim];
        let mut grad = Linear::zeros(self.in_dim, self.out_dim);
        for (k, &u) in upstream.iter().enumerate() {
            let row = &self.weight[k * self.in_dim..(k + 1) * self.in_dim];
            let grow = &mut grad.weight[k * self.in_dim..(k + 1) * self.in_dim];
            for j in 0..self.in_dim {
                grad_x[j] += row[j] * u;
                grow[j] = x[j] * u;
            }
            grad.bias[k] = u;
        }
        Ok((grad_x, grad))
    }
}

/// Softmax followed by the negative log-likelihood of `target`.
pub fn softmax_cross_entropy(logits: &[f64], target: usize) -> Result<(f64, Vec<f64>)> {
    if target >= logits.len() {
        return Err(Error::InvalidArgument(format!(
            "target class {target} out of range for {} logits",
            logits.len()
        )));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
    let loss = -(logits[target] - max - log_sum);
    Ok((loss, softmax(logits)))
}

/// `probabilities - one_hot(target)`.
pub fn softmax_cross_entropy_backward(probabilities: &[f64], target: usize) -> Vec<f64> {
    let mut g = probabilities.to_vec();
    g[target] -= 1.0;
    g
}
