//! Mini-batch SGD with a single step-drop learning-rate schedule, stratified
//! splitting, grid augmentation and top-1 / group evaluation.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Serialize;

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::layers::FeatureMap;
use crate::model::{HeadWeights, ModelConfig, ModelParams};
use crate::rng::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrainConfig {
    pub lr0: f64,
    /// first epoch (0-based) that uses the reduced rate
    pub lr_drop_epoch: usize,
    pub lr_factor: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub train_fraction: f64,
    pub seed: u64,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 1e-2,
            lr_drop_epoch: 50,
            lr_factor: 0.1,
            weight_decay: 1e-4,
            epochs: 100,
            batch_size: 32,
            train_fraction: 0.3,
            seed: 0,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "train_fraction must lie in (0, 1), got {}",
                self.train_fraction
            )));
        }
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "lr0 must be finite and >= 0, got {}",
                self.lr0
            )));
        }
        if !(self.lr_factor > 0.0 && self.lr_factor <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "lr_factor must lie in (0, 1], got {}",
                self.lr_factor
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    if epoch < cfg.lr_drop_epoch {
        cfg.lr0
    } else {
        cfg.lr0 * cfg.lr_factor
    }
}

/// `w <- w - lr * (g + weight_decay * w)`; biases get no decay.
pub fn sgd_step(params: &mut HeadWeights, grads: &HeadWeights, lr: f64, weight_decay: f64) -> Result<()> {
    let gs = grads.tensors();
    let mut ws = params.tensors_mut();
    if ws.len() != gs.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} parameter tensors but {} gradient tensors",
            ws.len(),
            gs.len()
        )));
    }
    for (i, (w, g)) in ws.iter().zip(&gs).enumerate() {
        if w.values.len() != g.values.len() {
            return Err(Error::ShapeMismatch(format!(
                "tensor {i}: {} weights vs {} gradients",
                w.values.len(),
                g.values.len()
            )));
        }
    }
    for (w, g) in ws.iter_mut().zip(&gs) {
        let decay = if w.is_bias { 0.0 } else { weight_decay };
        for (wv, gv) in w.values.iter_mut().zip(g.values) {
            *wv -= lr * (gv + decay * *wv);
        }
    }
    Ok(())
}

pub fn split_seed(seed: u64) -> u64 {
    rng::derive_seed(seed, "split", 0)
}

/// Per class: shuffle, then `ceil(fraction * n_c)` samples go to train
/// (capped so at least one remains for test). Returned index lists are sorted.
pub fn stratified_split_indices(labels: &[usize], fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "split fraction must lie in (0, 1), got {fraction}"
        )));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let mut r = rng::seeded(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (class, mut idx) in by_class {
        let n = idx.len();
        if n < 2 {
            return Err(Error::InvalidArgument(format!(
                "class {class} has {n} sample(s); stratified split needs at least 2"
            )));
        }
        rng::shuffle(&mut r, &mut idx);
        // tolerance keeps e.g. 0.3 * 10 = 3.0000000000000004 at 3
        let k = ((fraction * n as f64 - 1e-9).ceil() as usize).clamp(1, n - 1);
        train.extend_from_slice(&idx[..k]);
        test.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

pub fn stratified_split<T: Clone>(
    items: &[T],
    label: impl Fn(&T) -> usize,
    fraction: f64,
    seed: u64,
) -> Result<(Vec<T>, Vec<T>)> {
    let labels: Vec<usize> = items.iter().map(label).collect();
    let (tr, te) = stratified_split_indices(&labels, fraction, seed)?;
    Ok((
        tr.into_iter().map(|i| items[i].clone()).collect(),
        te.into_iter().map(|i| items[i].clone()).collect(),
    ))
}

/// One of the eight grid symmetries: clockwise quarter turns, then an
/// optional horizontal flip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Augmentation {
    pub quarter_turns: u8,
    pub flip: bool,
}

impl Augmentation {
    pub const IDENTITY: Augmentation = Augmentation {
        quarter_turns: 0,
        flip: false,
    };

    pub fn sample(rng: &mut Rng) -> Self {
        let code = rng::uniform_below(rng, 8) as u8;
        Augmentation {
            quarter_turns: code % 4,
            flip: code >= 4,
        }
    }

    /// Applies the transform. Rotations require a square grid.
    pub fn apply(&self, map: &FeatureMap) -> Result<FeatureMap> {
        let (h, w, _) = map.shape();
        if !self.quarter_turns.is_multiple_of(4) && h != w {
            return Err(Error::ShapeMismatch(format!("cannot rotate a non-square {h}x{w} grid")));
        }
        let mut out = map.clone();
        for _ in 0..self.quarter_turns % 4 {
            out = rot90(&out);
        }
        if self.flip {
            out = hflip(&out);
        }
        Ok(out)
    }
}

/// Clockwise: `out[i][j] = in[H-1-j][i]`.
pub fn rot90(map: &FeatureMap) -> FeatureMap {
    let (h, w, c) = map.shape();
    let mut out = FeatureMap::zeros(w, h, c);
    for i in 0..w {
        for j in 0..h {
            out.pixel_mut(i, j).copy_from_slice(map.pixel(h - 1 - j, i));
        }
    }
    out
}

pub fn hflip(map: &FeatureMap) -> FeatureMap {
    let (h, w, _) = map.shape();
    let mut out = map.clone();
    for i in 0..h {
        for j in 0..w {
            out.pixel_mut(i, j).copy_from_slice(map.pixel(i, w - 1 - j));
        }
    }
    out
}

/// Which transform `augment` applied, and whether it had to drop the rotation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentDiagnostics {
    pub applied: Augmentation,
    pub rotation_dropped: bool,
}

/// Draws a uniform grid symmetry and applies it. A non-square grid keeps
/// only the flip component.
pub fn augment(features: &FeatureMap, rng: &mut Rng) -> (FeatureMap, AugmentDiagnostics) {
    let drawn = Augmentation::sample(rng);
    augment_with(features, drawn)
}

fn augment_with(features: &FeatureMap, drawn: Augmentation) -> (FeatureMap, AugmentDiagnostics) {
    let square = features.height() == features.width();
    let applied = if square {
        drawn
    } else {
        Augmentation {
            quarter_turns: 0,
            flip: drawn.flip,
        }
    };
    let out = applied.apply(features).expect("rotation only applied to square grids");
    (
        out,
        AugmentDiagnostics {
            applied,
            rotation_dropped: applied != drawn,
        },
    )
}

/// Per-epoch record.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub top1: Option<f64>,
    pub per_class: Vec<Option<f64>>,
    pub group_accuracy: Option<f64>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "-".into())
}

impl Metrics {
    pub const TABLE_HEADER: &'static str = "epoch\tlr\tloss\ttop1\tgroup_acc";

    /// Tab-separated row matching [`Metrics::TABLE_HEADER`].
    pub fn table_row(&self) -> String {
        format!(
            "{}\t{:e}\t{:.9}\t{}\t{}",
            self.epoch,
            self.lr,
            self.train_loss,
            fmt_opt(self.top1),
            fmt_opt(self.group_accuracy)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TopOneReport {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    /// `None` for classes without samples
    pub per_class: Vec<Option<f64>>,
    pub predictions: Vec<usize>,
}

pub fn predict_all(params: &ModelParams, samples: &[Sample]) -> Result<Vec<usize>> {
    samples
        .par_iter()
        .map(|s| params.predict(&s.alpha, &s.beta).map(|p| p.class))
        .collect()
}

pub fn top1_from_predictions(predictions: &[usize], labels: &[usize], classes: usize) -> Result<TopOneReport> {
    if predictions.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate an empty sample set".into()));
    }
    if predictions.len() != labels.len() {
        return Err(Error::LengthMismatch {
            expected: labels.len(),
            actual: predictions.len(),
        });
    }
    let mut hits = vec![0usize; classes];
    let mut totals = vec![0usize; classes];
    for (&p, &l) in predictions.iter().zip(labels) {
        if l >= classes {
            return Err(Error::InvalidArgument(format!(
                "label {l} out of range for {classes} classes"
            )));
        }
        totals[l] += 1;
        if p == l {
            hits[l] += 1;
        }
    }
    let correct: usize = hits.iter().sum();
    Ok(TopOneReport {
        accuracy: correct as f64 / predictions.len() as f64,
        correct,
        total: predictions.len(),
        per_class: hits
            .iter()
            .zip(&totals)
            .map(|(&h, &t)| (t > 0).then(|| h as f64 / t as f64))
            .collect(),
        predictions: predictions.to_vec(),
    })
}

pub fn evaluate_top1(params: &ModelParams, samples: &[Sample]) -> Result<TopOneReport> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate an empty sample set".into()));
    }
    let preds = predict_all(params, samples)?;
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    top1_from_predictions(&preds, &labels, params.config().classes)
}

/// Class index to group id. `None` entries are unmapped classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassGroups {
    groups: Vec<Option<i64>>,
}

impl ClassGroups {
    pub fn new(groups: Vec<Option<i64>>) -> Self {
        ClassGroups { groups }
    }

    pub fn singletons(classes: usize) -> Self {
        ClassGroups::new((0..classes as i64).map(Some).collect())
    }

    /// Builds the map from (class index, group id) pairs, rejecting a class
    /// that appears with two different groups.
    pub fn from_pairs(classes: usize, pairs: impl IntoIterator<Item = (usize, i64)>) -> Result<Self> {
        let mut groups = vec![None; classes];
        for (c, g) in pairs {
            if c >= classes {
                return Err(Error::InvalidArgument(format!(
                    "class {c} out of range for {classes} classes"
                )));
            }
            match groups[c] {
                Some(prev) if prev != g => {
                    return Err(Error::InvalidArgument(format!(
                        "class {c} is assigned to groups {prev} and {g}"
                    )))
                }
                _ => groups[c] = Some(g),
            }
        }
        Ok(ClassGroups { groups })
    }

    pub fn group_of(&self, class: usize) -> Option<i64> {
        self.groups.get(class).copied().flatten()
    }

    pub fn classes(&self) -> usize {
        self.groups.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupRow {
    pub group: i64,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupReport {
    pub overall: f64,
    pub correct: usize,
    pub total: usize,
    /// one row per true group, ascending group id
    pub rows: Vec<GroupRow>,
    /// predictions whose class has no group; counted incorrect
    pub unmapped_predictions: usize,
}

/// A sample is correct iff its predicted class belongs to the sample's group.
pub fn group_accuracy_from_predictions(
    predictions: &[usize],
    sample_groups: &[i64],
    groups: &ClassGroups,
) -> Result<GroupReport> {
    if predictions.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate an empty sample set".into()));
    }
    if predictions.len() != sample_groups.len() {
        return Err(Error::LengthMismatch {
            expected: sample_groups.len(),
            actual: predictions.len(),
        });
    }
    let mut table: BTreeMap<i64, (usize, usize)> = BTreeMap::new();
    let mut unmapped = 0;
    for (&p, &g) in predictions.iter().zip(sample_groups) {
        let entry = table.entry(g).or_default();
        entry.1 += 1;
        match groups.group_of(p) {
            Some(pg) if pg == g => entry.0 += 1,
            Some(_) => {}
            None => unmapped += 1,
        }
    }
    let correct: usize = table.values().map(|v| v.0).sum();
    Ok(GroupReport {
        overall: correct as f64 / predictions.len() as f64,
        correct,
        total: predictions.len(),
        rows: table
            .into_iter()
            .map(|(group, (c, t))| GroupRow {
                group,
                correct: c,
                total: t,
                accuracy: c as f64 / t as f64,
            })
            .collect(),
        unmapped_predictions: unmapped,
    })
}

fn sample_groups(samples: &[Sample]) -> Result<Vec<i64>> {
    samples
        .iter()
        .map(|s| {
            s.group
                .ok_or_else(|| Error::InvalidArgument(format!("sample {} has no group label", s.id)))
        })
        .collect()
}

pub fn evaluate_group(params: &ModelParams, samples: &[Sample], groups: &ClassGroups) -> Result<GroupReport> {
    let sg = sample_groups(samples)?;
    let preds = predict_all(params, samples)?;
    group_accuracy_from_predictions(&preds, &sg, groups)
}

/// Result of [`train_loop`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub history: Vec<Metrics>,
}

/// Mean loss and mean gradient over one batch; per-sample work may run in
/// parallel but accumulation follows batch order.
fn batch_gradient(params: &ModelParams, batch: &[(FeatureMap, FeatureMap, usize)]) -> Result<(f64, HeadWeights)> {
    let per_sample: Vec<Result<(f64, HeadWeights)>> =
        batch.par_iter().map(|(a, b, y)| params.backward(a, b, *y)).collect();
    let mut total = HeadWeights::zeros(params.config());
    let mut loss_sum = 0.0;
    let scale = 1.0 / batch.len() as f64;
    for r in per_sample {
        let (loss, g) = r?;
        loss_sum += loss;
        total.add_scaled(&g, scale)?;
    }
    Ok((loss_sum, total))
}

/// Trains from `init` on `train`, evaluating on `test` after each epoch.
///
/// Epoch `e` shuffles with a stream derived from `(seed, e)` and, when
/// augmentation is on, draws one grid symmetry per sample (applied to both
/// branches) from another `(seed, e)` stream. The recorded training loss is
/// the mean per-sample loss over the epoch, measured before each update.
pub fn train_from(
    init: ModelParams,
    train: &[Sample],
    test: &[Sample],
    cfg: &TrainConfig,
    groups: Option<&ClassGroups>,
    mut on_epoch: impl FnMut(&Metrics),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut params = init;
    let mut history = Vec::with_capacity(cfg.epochs);
    if cfg.epochs > 0 && train.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let classes = params.config().classes;
    if let Some(s) = train.iter().chain(test).find(|s| s.label >= classes) {
        return Err(Error::InvalidArgument(format!(
            "sample {} has label {} but the model has {classes} classes",
            s.id, s.label
        )));
    }
    let test_groups = match groups {
        Some(g) if !test.is_empty() => Some((g, sample_groups(test)?)),
        _ => None,
    };
    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        let mut order: Vec<usize> = (0..train.len()).collect();
        rng::shuffle(
            &mut rng::seeded(rng::derive_seed(cfg.seed, "shuffle", epoch as u64)),
            &mut order,
        );
        let mut aug_rng = rng::seeded(rng::derive_seed(cfg.seed, "augment", epoch as u64));
        let mut loss_sum = 0.0;
        for (batch_index, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<(FeatureMap, FeatureMap, usize)> = chunk
                .iter()
                .map(|&i| {
                    let s = &train[i];
                    if cfg.augment {
                        let t = Augmentation::sample(&mut aug_rng);
                        let (a, _) = augment_with(&s.alpha, t);
                        let (b, _) = augment_with(&s.beta, t);
                        (a, b, s.label)
                    } else {
                        (s.alpha.clone(), s.beta.clone(), s.label)
                    }
                })
                .collect();
            let (batch_loss, grad) = batch_gradient(&params, &batch)?;
            if !batch_loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: batch_index,
                });
            }
            loss_sum += batch_loss;
            sgd_step(&mut params.head, &grad, lr, cfg.weight_decay)?;
        }
        let (top1, per_class, group_accuracy) = if test.is_empty() {
            (None, Vec::new(), None)
        } else {
            let preds = predict_all(&params, test)?;
            let labels: Vec<usize> = test.iter().map(|s| s.label).collect();
            let rep = top1_from_predictions(&preds, &labels, classes)?;
            let ga = match &test_groups {
                Some((g, sg)) => Some(group_accuracy_from_predictions(&preds, sg, g)?.overall),
                None => None,
            };
            (Some(rep.accuracy), rep.per_class, ga)
        };
        let m = Metrics {
            epoch,
            lr,
            train_loss: loss_sum / train.len() as f64,
            top1,
            per_class,
            group_accuracy,
        };
        on_epoch(&m);
        history.push(m);
    }
    Ok(TrainOutcome { params, history })
}

/// Initializes a model from `cfg.seed` and trains it.
pub fn train_loop(
    train: &[Sample],
    test: &[Sample],
    model: ModelConfig,
    cfg: &TrainConfig,
    groups: Option<&ClassGroups>,
) -> Result<TrainOutcome> {
    let init = ModelParams::init(model, rng::derive_seed(cfg.seed, "model", 0))?;
    train_from(init, train, test, cfg, groups, |_| {})
}
