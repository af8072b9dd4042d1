//! Feature-map files, dataset manifests and the synthetic motif generator.
//!
//! CNFM feature file (little-endian):
//!
//! | offset | size | field                          |
//! |--------|------|--------------------------------|
//! | 0      | 4    | magic `"CNFM"`                 |
//! | 4      | 2    | u16 version = 1                |
//! | 6      | 2    | u16 reserved = 0               |
//! | 8      | 4    | u32 H                          |
//! | 12     | 4    | u32 W                          |
//! | 16     | 4    | u32 C                          |
//! | 20     | 4HWC | f32 values, row-major (h, w, c) |
//!
//! Manifest: UTF-8, tab-separated, one header line
//! `sample_id alpha_path beta_path class_label group_id`, then one record per
//! line. Lines starting with `#` are comments. Relative paths resolve against
//! the manifest's directory. `group_id` is -1 when a sample has no group.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::layers::FeatureMap;
use crate::rng;

pub const FEATURE_MAGIC: &[u8; 4] = b"CNFM";
pub const FEATURE_VERSION: u16 = 1;
pub const FEATURE_HEADER_LEN: usize = 20;

pub const MANIFEST_COLUMNS: [&str; 5] = ["sample_id", "alpha_path", "beta_path", "class_label", "group_id"];

fn format_err(path: &Path, offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        message: message.into(),
    }
}

/// Serializes a map to CNFM bytes. Values are stored as f32.
pub fn encode_feature(map: &FeatureMap) -> Result<Vec<u8>> {
    if let Some(i) = map.data().iter().position(|v| !(*v as f32).is_finite()) {
        return Err(Error::NonFinite {
            index: i,
            value: map.data()[i],
        });
    }
    let (h, w, c) = map.shape();
    let mut buf = Vec::with_capacity(FEATURE_HEADER_LEN + 4 * map.data().len());
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    buf.extend_from_slice(&0u16.to_le_bytes());
    for dim in [h, w, c] {
        let dim = u32::try_from(dim).map_err(|_| Error::InvalidArgument(format!("dimension {dim} exceeds u32")))?;
        buf.extend_from_slice(&dim.to_le_bytes());
    }
    for v in map.data() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    Ok(buf)
}

/// Parses CNFM bytes. `path` is only used in error messages.
pub fn decode_feature(path: &Path, bytes: &[u8]) -> Result<FeatureMap> {
    if bytes.len() < FEATURE_HEADER_LEN {
        return Err(format_err(
            path,
            bytes.len(),
            format!(
                "header truncated: expected {FEATURE_HEADER_LEN} bytes, got {}",
                bytes.len()
            ),
        ));
    }
    if &bytes[0..4] != FEATURE_MAGIC {
        return Err(format_err(path, 0, "bad magic, expected \"CNFM\""));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FEATURE_VERSION {
        return Err(format_err(path, 4, format!("unsupported version {version}")));
    }
    let reserved = u16::from_le_bytes([bytes[6], bytes[7]]);
    if reserved != 0 {
        return Err(format_err(path, 6, format!("reserved field is {reserved}, expected 0")));
    }
    let dim = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as u64;
    let (h, w, c) = (dim(8), dim(12), dim(16));
    for (off, v, name) in [(8, h, "H"), (12, w, "W"), (16, c, "C")] {
        if v == 0 {
            return Err(format_err(path, off, format!("{name} is zero")));
        }
    }
    let expected = h
        .checked_mul(w)
        .and_then(|x| x.checked_mul(c))
        .and_then(|x| x.checked_mul(4))
        .and_then(|x| x.checked_add(FEATURE_HEADER_LEN as u64))
        .ok_or_else(|| format_err(path, 8, format!("dimensions {h}x{w}x{c} overflow")))?;
    if expected != bytes.len() as u64 {
        return Err(format_err(
            path,
            FEATURE_HEADER_LEN,
            format!(
                "size mismatch: header {h}x{w}x{c} needs {expected} bytes, file has {}",
                bytes.len()
            ),
        ));
    }
    let mut data = Vec::with_capacity((h * w * c) as usize);
    for (i, chunk) in bytes[FEATURE_HEADER_LEN..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(format_err(
                path,
                FEATURE_HEADER_LEN + 4 * i,
                format!("non-finite value {v} at element {i}"),
            ));
        }
        data.push(v as f64);
    }
    FeatureMap::new(h as usize, w as usize, c as usize, data)
}

pub fn write_feature(path: &Path, map: &FeatureMap) -> Result<()> {
    write_atomic(path, &encode_feature(map)?)
}

pub fn read_feature(path: &Path) -> Result<FeatureMap> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_feature(path, &bytes)
}

/// One manifest line as written to disk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRow {
    pub sample_id: String,
    pub alpha_path: PathBuf,
    pub beta_path: PathBuf,
    pub class_label: i64,
    pub group_id: i64,
}

pub fn format_manifest(rows: &[ManifestRow], comments: &[String]) -> String {
    let mut out = String::new();
    for c in comments {
        let _ = writeln!(out, "# {c}");
    }
    out.push_str(&MANIFEST_COLUMNS.join("\t"));
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}",
            r.sample_id,
            r.alpha_path.display(),
            r.beta_path.display(),
            r.class_label,
            r.group_id
        );
    }
    out
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow], comments: &[String]) -> Result<()> {
    write_atomic(path, format_manifest(rows, comments).as_bytes())
}

/// A validated manifest record with resolved paths and a remapped label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub sample_id: String,
    pub alpha_path: PathBuf,
    pub beta_path: PathBuf,
    /// contiguous class index in `0..K`
    pub label: usize,
    pub original_label: i64,
    pub group: Option<i64>,
    pub line: usize,
}

impl Record {
    pub fn to_row(&self) -> ManifestRow {
        ManifestRow {
            sample_id: self.sample_id.clone(),
            alpha_path: self.alpha_path.clone(),
            beta_path: self.beta_path.clone(),
            class_label: self.original_label,
            group_id: self.group.unwrap_or(-1),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Manifest {
    pub path: PathBuf,
    pub comments: Vec<String>,
    pub records: Vec<Record>,
    /// `label_map[k]` is the original label of class index `k`
    pub label_map: Vec<i64>,
}

impl Manifest {
    pub fn classes(&self) -> usize {
        self.label_map.len()
    }

    /// False when every record has group id -1.
    pub fn has_groups(&self) -> bool {
        self.records.iter().any(|r| r.group.is_some())
    }

    pub fn labels(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.label).collect()
    }

    pub fn label_mapping_is_identity(&self) -> bool {
        self.label_map.iter().enumerate().all(|(k, &l)| l == k as i64)
    }
}

/// Parses manifest text. Paths are resolved against `base_dir` but not checked.
pub fn parse_manifest(path: &Path, text: &str, base_dir: &Path) -> Result<Manifest> {
    let err = |line: usize, message: String| Error::Manifest {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut comments = Vec::new();
    let mut header_seen = false;
    let mut rows: Vec<(usize, ManifestRow)> = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim_end_matches('\r');
        if let Some(c) = line.strip_prefix('#') {
            comments.push(c.trim().to_string());
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if !header_seen {
            if fields != MANIFEST_COLUMNS {
                return Err(err(
                    line_no,
                    format!("expected header {:?}, got {:?}", MANIFEST_COLUMNS.join("\t"), line),
                ));
            }
            header_seen = true;
            continue;
        }
        if fields.len() != MANIFEST_COLUMNS.len() {
            return Err(err(
                line_no,
                format!(
                    "expected {} tab-separated fields, got {}",
                    MANIFEST_COLUMNS.len(),
                    fields.len()
                ),
            ));
        }
        let sample_id = fields[0].trim();
        if sample_id.is_empty() {
            return Err(err(line_no, "empty sample_id".into()));
        }
        if let Some(prev) = seen.insert(sample_id.to_string(), line_no) {
            return Err(err(
                line_no,
                format!("duplicate sample_id {sample_id:?} (first seen on line {prev}, again on line {line_no})"),
            ));
        }
        let class_label: i64 = fields[3]
            .trim()
            .parse()
            .map_err(|_| err(line_no, format!("class_label {:?} is not an integer", fields[3])))?;
        let group_id: i64 = fields[4]
            .trim()
            .parse()
            .map_err(|_| err(line_no, format!("group_id {:?} is not an integer", fields[4])))?;
        if group_id < -1 {
            return Err(err(line_no, format!("group_id {group_id} must be >= -1")));
        }
        for (col, p) in [(1, fields[1]), (2, fields[2])] {
            if p.trim().is_empty() {
                return Err(err(line_no, format!("empty {}", MANIFEST_COLUMNS[col])));
            }
        }
        rows.push((
            line_no,
            ManifestRow {
                sample_id: sample_id.to_string(),
                alpha_path: base_dir.join(fields[1].trim()),
                beta_path: base_dir.join(fields[2].trim()),
                class_label,
                group_id,
            },
        ));
    }
    if !header_seen {
        return Err(err(0, "missing header line".into()));
    }
    if rows.is_empty() {
        return Err(err(0, "manifest has no records".into()));
    }
    let mut label_map: Vec<i64> = rows.iter().map(|(_, r)| r.class_label).collect();
    label_map.sort_unstable();
    label_map.dedup();
    let index: BTreeMap<i64, usize> = label_map.iter().enumerate().map(|(k, &l)| (l, k)).collect();
    let records = rows
        .into_iter()
        .map(|(line, r)| Record {
            label: index[&r.class_label],
            sample_id: r.sample_id,
            alpha_path: r.alpha_path,
            beta_path: r.beta_path,
            original_label: r.class_label,
            group: (r.group_id >= 0).then_some(r.group_id),
            line,
        })
        .collect();
    Ok(Manifest {
        path: path.to_path_buf(),
        comments,
        records,
        label_map,
    })
}

/// Reads and validates a manifest, including that every feature path exists.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let manifest = parse_manifest(path, &text, base)?;
    for r in &manifest.records {
        for p in [&r.alpha_path, &r.beta_path] {
            if !p.is_file() {
                return Err(Error::Manifest {
                    path: path.to_path_buf(),
                    line: r.line,
                    message: format!("feature file {} not found", p.display()),
                });
            }
        }
    }
    Ok(manifest)
}

/// A loaded sample: both feature maps plus its class and group.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub alpha: FeatureMap,
    pub beta: FeatureMap,
    pub label: usize,
    pub group: Option<i64>,
}

pub fn load_samples(manifest: &Manifest) -> Result<Vec<Sample>> {
    manifest
        .records
        .iter()
        .map(|r| {
            Ok(Sample {
                id: r.sample_id.clone(),
                alpha: read_feature(&r.alpha_path)?,
                beta: read_feature(&r.beta_path)?,
                label: r.label,
                group: r.group,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub classes: usize,
    pub samples_per_class: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub noise: f64,
    pub max_shift: usize,
    pub seed: u64,
    /// Classes per group; 0 disables groups. Classes in one group share base
    /// templates and differ only by a fixed circular offset (their "style").
    pub styles_per_group: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            classes: 10,
            samples_per_class: 60,
            height: 7,
            width: 7,
            channels: 16,
            noise: 0.5,
            max_shift: 3,
            seed: 0,
            styles_per_group: 0,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.samples_per_class == 0 || self.height == 0 || self.width == 0 || self.channels == 0
        {
            return Err(Error::InvalidArgument(format!(
                "synthetic dims must be positive: {self:?}"
            )));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "noise must be >= 0, got {}",
                self.noise
            )));
        }
        if self.styles_per_group > self.height.min(self.width) {
            return Err(Error::InvalidArgument(format!(
                "styles_per_group {} exceeds grid side {}",
                self.styles_per_group,
                self.height.min(self.width)
            )));
        }
        Ok(())
    }

    pub fn group_of(&self, class: usize) -> i64 {
        class.checked_div(self.styles_per_group).map_or(-1, |g| g as i64)
    }
}

/// Circular spatial shift: `out[h, w] = in[(h - dh) mod H, (w - dw) mod W]`.
pub fn roll(map: &FeatureMap, dh: isize, dw: isize) -> FeatureMap {
    let (hh, ww, _) = map.shape();
    let mut out = map.clone();
    for h in 0..hh {
        for w in 0..ww {
            let sh = (h as isize - dh).rem_euclid(hh as isize) as usize;
            let sw = (w as isize - dw).rem_euclid(ww as isize) as usize;
            out.pixel_mut(h, w).copy_from_slice(map.pixel(sh, sw));
        }
    }
    out
}

fn gaussian_map(seed: u64, h: usize, w: usize, c: usize) -> FeatureMap {
    let mut rng = rng::seeded(seed);
    FeatureMap::from_fn(h, w, c, |_, _, _| StandardNormal.sample(&mut rng))
}

fn f32_round(map: &mut FeatureMap) {
    map.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
}

/// Generates `cfg.classes * cfg.samples_per_class` samples in memory.
///
/// Per class, one unit-variance Gaussian template for each branch. Per
/// sample, both templates get the same random circular shift in
/// `[-max_shift, max_shift]^2`, independent Gaussian noise of standard
/// deviation `noise`, then a ReLU clamp. Values are rounded to f32 so the
/// in-memory samples equal what a round trip through CNFM files yields.
pub fn synthesize(cfg: &SynthConfig) -> Result<Vec<Sample>> {
    cfg.validate()?;
    let (h, w, c) = (cfg.height, cfg.width, cfg.channels);
    let templates: Vec<(FeatureMap, FeatureMap)> = (0..cfg.classes)
        .map(|k| {
            let (base_key, offset) = if cfg.styles_per_group == 0 {
                (k as u64, (0, 0))
            } else {
                let s = k % cfg.styles_per_group;
                (
                    (k / cfg.styles_per_group) as u64,
                    (
                        (s * h / cfg.styles_per_group) as isize,
                        (s * w / cfg.styles_per_group) as isize,
                    ),
                )
            };
            let a = gaussian_map(rng::derive_seed(cfg.seed, "template-alpha", base_key), h, w, c);
            let b = gaussian_map(rng::derive_seed(cfg.seed, "template-beta", base_key), h, w, c);
            (roll(&a, offset.0, offset.1), roll(&b, offset.0, offset.1))
        })
        .collect();
    let span = 2 * cfg.max_shift as u64 + 1;
    let mut samples = Vec::with_capacity(cfg.classes * cfg.samples_per_class);
    for (k, (ta, tb)) in templates.iter().enumerate() {
        for i in 0..cfg.samples_per_class {
            let index = (k * cfg.samples_per_class + i) as u64;
            let mut r = rng::seeded(rng::derive_seed(cfg.seed, "sample", index));
            let dh = rng::uniform_below(&mut r, span) as isize - cfg.max_shift as isize;
            let dw = rng::uniform_below(&mut r, span) as isize - cfg.max_shift as isize;
            let mut make = |t: &FeatureMap| {
                let mut m = roll(t, dh, dw);
                for v in m.data_mut() {
                    let n: f64 = StandardNormal.sample(&mut r);
                    *v = (*v + cfg.noise * n).max(0.0);
                }
                f32_round(&mut m);
                m
            };
            let alpha = make(ta);
            let beta = make(tb);
            samples.push(Sample {
                id: format!("c{k:03}_s{i:04}"),
                alpha,
                beta,
                label: k,
                group: (cfg.styles_per_group > 0).then(|| cfg.group_of(k)),
            });
        }
    }
    Ok(samples)
}

/// Accuracy of classifying `test` by the nearest class centroid of `train`
/// (squared Euclidean distance over the concatenated raw feature maps).
pub fn nearest_centroid_accuracy(train: &[Sample], test: &[Sample]) -> Result<f64> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::InvalidArgument(
            "nearest centroid needs nonempty train and test sets".into(),
        ));
    }
    let flat = |s: &Sample| -> Vec<f64> { s.alpha.data().iter().chain(s.beta.data()).copied().collect() };
    let dim = flat(&train[0]).len();
    let classes = train.iter().chain(test).map(|s| s.label).max().unwrap() + 1;
    let mut sums = vec![vec![0.0; dim]; classes];
    let mut counts = vec![0usize; classes];
    for s in train {
        for (a, b) in sums[s.label].iter_mut().zip(flat(s)) {
            *a += b;
        }
        counts[s.label] += 1;
    }
    let centroids: Vec<Option<Vec<f64>>> = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &n)| (n > 0).then(|| s.into_iter().map(|v| v / n as f64).collect()))
        .collect();
    let mut correct = 0usize;
    for s in test {
        let x = flat(s);
        let mut best = (f64::INFINITY, usize::MAX);
        for (k, c) in centroids.iter().enumerate() {
            if let Some(c) = c {
                let d: f64 = c.iter().zip(&x).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best.0 {
                    best = (d, k);
                }
            }
        }
        if best.1 == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / test.len() as f64)
}

/// Outcome of [`generate_synthetic`].
#[derive(Debug, Clone)]
pub struct SynthReport {
    pub manifest_path: PathBuf,
    pub samples: usize,
    /// nearest-centroid test accuracy on the split `train` uses for the same seed
    pub nearest_centroid_floor: f64,
    pub split_fraction: f64,
}

/// Writes the synthetic set under `out_dir` (`features/*.cnfm` plus
/// `manifest.tsv`) and records the nearest-centroid floor for a
/// `split_fraction` stratified split seeded like the trainer's.
pub fn generate_synthetic(cfg: &SynthConfig, out_dir: &Path, split_fraction: f64) -> Result<SynthReport> {
    let samples = synthesize(cfg)?;
    let feat_dir = out_dir.join("features");
    std::fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;
    let mut rows = Vec::with_capacity(samples.len());
    for s in &samples {
        let a_rel = PathBuf::from("features").join(format!("{}.alpha.cnfm", s.id));
        let b_rel = PathBuf::from("features").join(format!("{}.beta.cnfm", s.id));
        write_feature(&out_dir.join(&a_rel), &s.alpha)?;
        write_feature(&out_dir.join(&b_rel), &s.beta)?;
        rows.push(ManifestRow {
            sample_id: s.id.clone(),
            alpha_path: a_rel,
            beta_path: b_rel,
            class_label: s.label as i64,
            group_id: s.group.unwrap_or(-1),
        });
    }
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let split_seed = crate::train::split_seed(cfg.seed);
    let (train_idx, test_idx) = crate::train::stratified_split_indices(&labels, split_fraction, split_seed)?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| samples[i].clone()).collect::<Vec<_>>();
    let floor = nearest_centroid_accuracy(&pick(&train_idx), &pick(&test_idx))?;
    let comments =
        vec![
            format!(
            "synthetic classes={} samples_per_class={} grid={}x{}x{} noise={} max_shift={} seed={} styles_per_group={}",
            cfg.classes, cfg.samples_per_class, cfg.height, cfg.width, cfg.channels, cfg.noise, cfg.max_shift,
            cfg.seed, cfg.styles_per_group
        ),
            format!(
                "nearest_centroid_floor={floor:.6} split_fraction={split_fraction} split_seed_from={}",
                cfg.seed
            ),
        ];
    let manifest_path = out_dir.join("manifest.tsv");
    write_manifest(&manifest_path, &rows, &comments)?;
    Ok(SynthReport {
        manifest_path,
        samples: samples.len(),
        nearest_centroid_floor: floor,
        split_fraction,
    })
}
