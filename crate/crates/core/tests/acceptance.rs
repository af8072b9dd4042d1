//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fails.
//!
//! Run with `cargo test -p coinnet --test acceptance`.

use std::fmt::Write as _;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use coinnet::checks;
use coinnet::data::{self, decode_feature, encode_feature, SynthConfig, FEATURE_HEADER_LEN};
use coinnet::layers::{l2_normalize, AttentionPool, Conv3x3, FeatureMap, ResidualGroup};
use coinnet::model::{self, ModelConfig, ModelParams};
use coinnet::numerics::{circular_convolve, dft, idft};
use coinnet::rng;
use coinnet::train::{
    self, evaluate_group, evaluate_top1, group_accuracy_from_predictions, ClassGroups, Metrics, TrainConfig,
};
use coinnet::Error;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

type Criterion = fn() -> Result<Outcome, Error>;

fn random_vec(r: &mut rng::Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| 2.0 * rng::unit_f64(r) - 1.0).collect()
}

fn random_map(r: &mut rng::Rng, h: usize, w: usize, c: usize) -> FeatureMap {
    FeatureMap::new(h, w, c, random_vec(r, h * w * c)).unwrap()
}

fn tensor_sketch_equivalence() -> Result<Outcome, Error> {
    let start = Instant::now();
    let report = checks::sketch_equivalence(16, 8, 200, 2024)?;
    let elapsed = start.elapsed();
    Ok(outcome(
        report.passed() && elapsed < Duration::from_secs(1),
        format!(
            "200 pairs n=16 d=8: max dev {:.2e} (<= 1e-8), {:.3}s (< 1s)",
            report.max_deviation,
            elapsed.as_secs_f64()
        ),
    ))
}

fn count_sketch_unbiasedness() -> Result<Outcome, Error> {
    let r = checks::sketch_unbiasedness(64, 32, 10_000, 2024)?;
    Ok(outcome(
        r.passed() == Some(true),
        format!(
            "mean {:.4} vs exact {:.4}: {:.2} standard errors (<= 3)",
            r.mean,
            r.exact,
            r.z_score.unwrap_or(f64::NAN)
        ),
    ))
}

fn fft_correctness() -> Result<Outcome, Error> {
    let mut r = rng::seeded(3);
    let (mut round, mut conv) = (0.0f64, 0.0f64);
    for n in 1..=64 {
        let a = random_vec(&mut r, n);
        let b = random_vec(&mut r, n);
        let back = idft(&dft(&a)?)?;
        round = round.max(a.iter().zip(&back).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max));
        let fast = circular_convolve(&a, &b)?;
        for (k, f) in fast.iter().enumerate() {
            let slow: f64 = (0..n).map(|i| a[i] * b[(k + n - i) % n]).sum();
            conv = conv.max((f - slow).abs());
        }
    }
    Ok(outcome(
        round <= 1e-10 && conv <= 1e-8,
        format!("lengths 1..64: round trip {round:.2e} (<= 1e-10), convolution vs naive {conv:.2e} (<= 1e-8)"),
    ))
}

fn gradient_suite() -> Result<Outcome, Error> {
    let reports = checks::gradient_suite(2024, 20)?;
    let failing: Vec<&str> = reports
        .iter()
        .filter(|r| !r.passed())
        .map(|r| r.name.as_str())
        .collect();
    let worst = reports
        .iter()
        .filter(|r| r.tolerance == checks::LAYER_GRAD_TOLERANCE)
        .map(|r| r.max_relative_error)
        .fold(0.0, f64::max);
    let min_instances = reports.iter().map(|r| r.instances).min().unwrap_or(0);
    Ok(outcome(
        failing.is_empty() && min_instances >= 20,
        format!(
            "{} suites incl. full model (2x2, C=3, d=4, K=3), >= {min_instances} instances each, worst rel err {worst:.2e} (<= 1e-4){}",
            reports.len(),
            if failing.is_empty() { String::new() } else { format!("; failing: {failing:?}") }
        ),
    ))
}

fn structural_invariants() -> Result<Outcome, Error> {
    let mut r = rng::seeded(5);
    let mut attn_dev = 0.0f64;
    let mut norm_dev = 0.0f64;
    let mut identity = true;
    for _ in 0..200 {
        let (h, w, c) = (
            1 + rng::uniform_below(&mut r, 6) as usize,
            1 + rng::uniform_below(&mut r, 6) as usize,
            1 + rng::uniform_below(&mut r, 4) as usize,
        );
        let x = random_map(&mut r, h, w, c).scaled(10.0);
        let pool = AttentionPool::new(Conv3x3::new(c, 1, random_vec(&mut r, 9 * c), random_vec(&mut r, 1))?)?;
        let (_, attn) = pool.forward(&x)?;
        attn_dev = attn_dev.max((attn.weights.iter().sum::<f64>() - 1.0).abs());
        let v = random_vec(&mut r, c * 3);
        let n = l2_normalize(&v).iter().map(|t| t * t).sum::<f64>().sqrt();
        norm_dev = norm_dev.max(if n == 0.0 { 0.0 } else { (n - 1.0).abs() });
        let nonneg = FeatureMap::new(h, w, c, x.data().iter().map(|t| t.abs()).collect())?;
        identity &= ResidualGroup::zeros(c, 4).forward(&nonneg)? == nonneg;
    }
    let zero_norm = l2_normalize(&[0.0; 4]).iter().all(|&t| t == 0.0);
    let cfg = ModelConfig {
        height: 3,
        width: 3,
        alpha_channels: 4,
        beta_channels: 5,
        sketch_dim: 8,
        blocks: 4,
        classes: 3,
    };
    let params = ModelParams::init(cfg, 5)?;
    let mut z_dev = 0.0f64;
    for _ in 0..20 {
        let a = random_map(&mut r, 3, 3, 4);
        let b = random_map(&mut r, 3, 3, 5);
        let base = params.forward(&a, &b)?.z;
        for s in [0.01, 3.0, 250.0] {
            for z in [params.forward(&a.scaled(s), &b)?.z, params.forward(&a, &b.scaled(s))?.z] {
                z_dev = z_dev.max(z.iter().zip(&base).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max));
            }
        }
    }
    Ok(outcome(
        attn_dev <= 1e-6 && norm_dev <= 1e-9 && zero_norm && identity && z_dev <= 1e-9,
        format!(
            "attention sum dev {attn_dev:.1e}, l2 norm dev {norm_dev:.1e}, zero group identity {identity}, z scale dev {z_dev:.1e}"
        ),
    ))
}

const SYNTH_SKETCH_DIM: usize = 32;

fn synthetic_end_to_end() -> Result<Outcome, Error> {
    let dir = tempfile::tempdir().map_err(|e| Error::io(Path::new("tempdir"), e))?;
    let synth = SynthConfig::default();
    let report = data::generate_synthetic(&synth, dir.path(), 0.3)?;
    let manifest = data::load_manifest(&report.manifest_path)?;
    let samples = data::load_samples(&manifest)?;
    let cfg = TrainConfig {
        batch_size: 4,
        ..TrainConfig::default()
    };
    let (train_set, test_set) =
        train::stratified_split(&samples, |s| s.label, cfg.train_fraction, train::split_seed(cfg.seed))?;
    let model = ModelConfig {
        height: synth.height,
        width: synth.width,
        alpha_channels: synth.channels,
        beta_channels: synth.channels,
        sketch_dim: SYNTH_SKETCH_DIM,
        blocks: 4,
        classes: synth.classes,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .expect("thread pool");
    let start = Instant::now();
    let trained = pool.install(|| train::train_loop(&train_set, &test_set, model, &cfg, None))?;
    let elapsed = start.elapsed();
    let top1 = evaluate_top1(&trained.params, &test_set)?.accuracy;
    let best_epoch = trained.history.iter().position(|m| m.top1.is_some_and(|t| t >= 0.95));
    let pass = top1 >= 0.95
        && trained.history.len() <= 100
        && elapsed < Duration::from_secs(600)
        && top1 > report.nearest_centroid_floor;
    Ok(outcome(
        pass,
        format!(
            "10x60 on 7x7x16, split 0.3, d={SYNTH_SKETCH_DIM}, batch 4, 1 thread: top-1 {top1:.4} (>= 0.95, first reached at epoch {}), nearest-centroid floor {:.4}, {:.0}s (< 600s)",
            best_epoch.map_or("-".to_string(), |e| e.to_string()),
            report.nearest_centroid_floor,
            elapsed.as_secs_f64()
        ),
    ))
}

fn disjoint_group_protocol() -> Result<Outcome, Error> {
    let synth = SynthConfig {
        classes: 6,
        samples_per_class: 8,
        height: 4,
        width: 4,
        channels: 3,
        styles_per_group: 3,
        ..SynthConfig::default()
    };
    let samples = data::synthesize(&synth)?;
    let model = ModelConfig {
        height: 4,
        width: 4,
        alpha_channels: 3,
        beta_channels: 3,
        sketch_dim: 6,
        blocks: 1,
        classes: 6,
    };
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 4,
        lr0: 0.2,
        ..TrainConfig::default()
    };
    let params = train::train_loop(&samples, &[], model, &cfg, None)?.params;
    let groups = ClassGroups::from_pairs(6, (0..6).map(|k| (k, synth.group_of(k))))?;
    let report = evaluate_group(&params, &samples, &groups)?;
    let top1 = evaluate_top1(&params, &samples)?;

    let mut confusion = [[0usize; 6]; 6];
    for (s, &p) in samples.iter().zip(&top1.predictions) {
        confusion[s.label][p] += 1;
    }
    let mut tally = [(0usize, 0usize); 2];
    for (t, row) in confusion.iter().enumerate() {
        for (p, &count) in row.iter().enumerate() {
            let g = t / 3;
            tally[g].1 += count;
            if p / 3 == g {
                tally[g].0 += count;
            }
        }
    }
    let hand_correct = tally[0].0 + tally[1].0;
    let exact = report.correct == hand_correct
        && report.total == samples.len()
        && report.overall == hand_correct as f64 / samples.len() as f64
        && report
            .rows
            .iter()
            .zip(&tally)
            .all(|(row, &(c, n))| row.correct == c && row.total == n);

    let labels: Vec<i64> = samples.iter().map(|s| s.label as i64).collect();
    let singleton = group_accuracy_from_predictions(&top1.predictions, &labels, &ClassGroups::singletons(6))?;
    let singleton_ok = singleton.overall == top1.accuracy;
    Ok(outcome(
        exact && singleton_ok && report.overall >= top1.accuracy,
        format!(
            "group acc {:.4} = hand tally {hand_correct}/{}: {exact}; singleton = top-1 ({:.4}): {singleton_ok}; group >= top-1",
            report.overall,
            samples.len(),
            top1.accuracy
        ),
    ))
}

fn run_once(dir: &Path) -> Result<(Vec<u8>, Vec<u8>), Error> {
    let synth = SynthConfig {
        classes: 4,
        samples_per_class: 10,
        ..SynthConfig::default()
    };
    let report = data::generate_synthetic(&synth, dir, 0.3)?;
    let samples = data::load_samples(&data::load_manifest(&report.manifest_path)?)?;
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 4,
        seed: 11,
        ..TrainConfig::default()
    };
    let (tr, te) = train::stratified_split(&samples, |s| s.label, cfg.train_fraction, train::split_seed(cfg.seed))?;
    let model = ModelConfig {
        height: 7,
        width: 7,
        alpha_channels: 16,
        beta_channels: 16,
        sketch_dim: 8,
        blocks: 4,
        classes: 4,
    };
    let out = train::train_loop(&tr, &te, model, &cfg, None)?;
    let mut metrics = String::from(Metrics::TABLE_HEADER);
    metrics.push('\n');
    for m in &out.history {
        let _ = writeln!(metrics, "{}", m.table_row());
    }
    let (mpath, cpath) = (dir.join("metrics.tsv"), dir.join("model.ckpt"));
    coinnet::write_atomic(&mpath, metrics.as_bytes())?;
    model::save_checkpoint(&out.params, &cpath)?;
    let read = |p: &Path| std::fs::read(p).map_err(|e| Error::io(p, e));
    Ok((read(&mpath)?, read(&cpath)?))
}

fn determinism() -> Result<Outcome, Error> {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ma, ca) = run_once(a.path())?;
    let (mb, cb) = run_once(b.path())?;
    Ok(outcome(
        ma == mb && ca == cb,
        format!(
            "two seeded runs: metrics {} bytes identical {}, checkpoints {} bytes identical {}",
            ma.len(),
            ma == mb,
            ca.len(),
            ca == cb
        ),
    ))
}

fn format_robustness() -> Result<Outcome, Error> {
    let mut r = rng::seeded(9);
    let mut round_trip = true;
    for (h, w, c) in [(1, 1, 1), (14, 14, 8), (3, 5, 2)] {
        let map = FeatureMap::new(
            h,
            w,
            c,
            (0..h * w * c)
                .map(|_| f64::from((rng::unit_f64(&mut r) * 6.0) as f32))
                .collect(),
        )?;
        let bytes = encode_feature(&map)?;
        round_trip &=
            bytes.len() == FEATURE_HEADER_LEN + 4 * h * w * c && decode_feature(Path::new("x"), &bytes)? == map;
    }
    let bytes = encode_feature(&random_map(&mut r, 3, 4, 2).scaled(1.0))?;
    let (mut rejected, mut total) = (0usize, 0usize);
    for pos in 0..FEATURE_HEADER_LEN {
        for delta in 1..=255u8 {
            let mut bad = bytes.clone();
            bad[pos] = bad[pos].wrapping_add(delta);
            total += 1;
            rejected += usize::from(decode_feature(Path::new("fuzz"), &bad).is_err());
        }
    }
    Ok(outcome(
        round_trip && rejected == total,
        format!("round trip bit-exact {round_trip}; header fuzz rejected {rejected}/{total}"),
    ))
}

fn main() -> ExitCode {
    let criteria: [(&str, Criterion); 9] = [
        ("tensor-sketch oracle equivalence", tensor_sketch_equivalence),
        ("count-sketch unbiasedness", count_sketch_unbiasedness),
        ("FFT correctness", fft_correctness),
        ("gradient suite", gradient_suite),
        ("structural invariants", structural_invariants),
        ("synthetic end-to-end", synthetic_end_to_end),
        ("disjoint-group protocol", disjoint_group_protocol),
        ("determinism", determinism),
        ("format robustness", format_robustness),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let (pass, detail) = match run() {
            Ok(o) => (o.pass, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        failed += usize::from(!pass);
        println!("[{}] {} {name}: {detail}", i + 1, if pass { "PASS" } else { "FAIL" });
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criterion/criteria failed");
        ExitCode::FAILURE
    }
}
