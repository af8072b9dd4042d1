use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use coinnet::checks;
use coinnet::data::{self, Manifest, Sample, SynthConfig};
use coinnet::model::{self, ModelConfig, ModelParams};
use coinnet::rng;
use coinnet::train::{self, ClassGroups, Metrics, TrainConfig};
use coinnet::{write_atomic, Error};

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  1  unexpected internal error
  2  invalid command line
  3  I/O failure (unreadable or unwritable path)
  4  malformed input file (feature file, manifest or checkpoint)
  5  dimension or shape mismatch, or invalid configuration value
  6  training diverged (non-finite loss)
  7  a numeric self-check failed";

#[derive(Parser, Debug)]
#[command(
    name = "coinnet",
    version,
    about = "Train and evaluate a compact-bilinear-pooling classification head over precomputed feature maps",
    after_help = EXIT_CODES
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the head on a manifest (stratified split, SGD, step LR drop)
    #[command(after_help = EXIT_CODES)]
    Train(TrainArgs),
    /// Top-1 accuracy of a checkpoint on a manifest
    #[command(after_help = EXIT_CODES)]
    Eval(EvalArgs),
    /// Group-level accuracy on samples from classes unseen in training
    #[command(after_help = EXIT_CODES)]
    EvalDisjoint(EvalDisjointArgs),
    /// Write a synthetic motif-feature dataset and its manifest
    #[command(after_help = EXIT_CODES)]
    GenSynth(GenSynthArgs),
    /// Tensor-sketch oracle equivalence and count-sketch unbiasedness
    #[command(after_help = EXIT_CODES)]
    CheckSketch(CheckSketchArgs),
    /// Finite-difference checks of every backward pass
    #[command(after_help = EXIT_CODES)]
    CheckGrad(CheckGradArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset manifest (TSV)
    #[arg(long)]
    manifest: PathBuf,
    /// Output checkpoint path
    #[arg(long)]
    out: PathBuf,
    /// Sketch (fused feature) dimension
    #[arg(long, default_value_t = 2048)]
    d: usize,
    /// Residual blocks in the residual group
    #[arg(long, default_value_t = 4)]
    blocks: usize,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    /// Mini-batch size
    #[arg(long, default_value_t = 32)]
    batch: usize,
    /// Initial learning rate
    #[arg(long, default_value_t = 1e-2)]
    lr: f64,
    /// First epoch (0-based) trained at the reduced learning rate
    #[arg(long, default_value_t = 50)]
    lr_drop_epoch: usize,
    /// Multiplier applied to the learning rate at the drop epoch
    #[arg(long, default_value_t = 0.1)]
    lr_factor: f64,
    /// Weight decay (not applied to biases)
    #[arg(long, default_value_t = 1e-4)]
    wd: f64,
    /// Fraction of each class used for training
    #[arg(long, default_value_t = 0.3)]
    split: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Disable rotation/flip augmentation of the feature grids
    #[arg(long)]
    no_augment: bool,
    /// Write per-epoch metrics to this file
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Write the train and test split manifests into this directory
    #[arg(long)]
    split_dir: Option<PathBuf>,
    /// Emit line-delimited JSON records instead of tables
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Take the class-label mapping from this manifest (e.g. the training manifest)
    #[arg(long)]
    labels_from: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct EvalDisjointArgs {
    /// Samples to score; only their group_id column is used as ground truth
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Manifest assigning each trained class to a group (usually the training manifest)
    #[arg(long)]
    groups: PathBuf,
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct GenSynthArgs {
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 60)]
    per_class: usize,
    #[arg(long, default_value_t = 7)]
    height: usize,
    #[arg(long, default_value_t = 7)]
    width: usize,
    #[arg(long, default_value_t = 16)]
    channels: usize,
    /// Standard deviation of the additive Gaussian noise
    #[arg(long, default_value_t = 0.5)]
    noise: f64,
    /// Largest circular shift applied per sample, in grid cells
    #[arg(long, default_value_t = 3)]
    max_shift: usize,
    /// Classes per group (0 = no groups)
    #[arg(long, default_value_t = 0)]
    styles_per_group: usize,
    /// Train fraction of the split used to record the nearest-centroid floor
    #[arg(long, default_value_t = 0.3)]
    split: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct CheckSketchArgs {
    /// Input length of each sketched vector
    #[arg(long, default_value_t = 64)]
    n: usize,
    /// Sketch dimension
    #[arg(long, default_value_t = 32)]
    d: usize,
    /// Random trials for both suites
    #[arg(long, default_value_t = 10000)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct CheckGradArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random instances per layer
    #[arg(long, default_value_t = 20)]
    instances: usize,
    #[arg(long)]
    json: bool,
}

#[derive(Debug)]
enum Failure {
    Core(Error),
    CheckFailed(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Core(e) => match e {
                Error::Io { .. } => 3,
                Error::Format { .. } | Error::Manifest { .. } | Error::NonFinite { .. } => 4,
                Error::ShapeMismatch(_)
                | Error::LengthMismatch { .. }
                | Error::InvalidArgument(_)
                | Error::SizeGuard { .. } => 5,
                Error::Diverged { .. } => 6,
                Error::AsymmetricSpectrum { .. } => 1,
            },
            Failure::CheckFailed(_) => 7,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Core(e) => write!(f, "{e}"),
            Failure::CheckFailed(m) => write!(f, "check failed: {m}"),
        }
    }
}

type CliResult<T = ()> = std::result::Result<T, Failure>;

fn print_config(json_mode: bool, command: &str, fields: Value) {
    if json_mode {
        println!("{}", json!({"record": "config", "command": command, "config": fields}));
    } else {
        println!("resolved configuration ({command}):");
        if let Value::Object(map) = fields {
            for (k, v) in map {
                println!("  {k} = {v}");
            }
        }
    }
}

/// All samples must share one alpha shape and one beta shape with equal grids.
fn dataset_dims(samples: &[Sample]) -> CliResult<(usize, usize, usize, usize)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidArgument("manifest has no samples".into()))?;
    let (h, w, c1) = first.alpha.shape();
    let c2 = first.beta.channels();
    for s in samples {
        if s.alpha.shape() != (h, w, c1) || s.beta.shape() != (h, w, c2) {
            return Err(Error::ShapeMismatch(format!(
                "sample {} has alpha {:?} / beta {:?}, expected {:?} / {:?}",
                s.id,
                s.alpha.shape(),
                s.beta.shape(),
                (h, w, c1),
                (h, w, c2)
            ))
            .into());
        }
    }
    Ok((h, w, c1, c2))
}

fn check_compatible(params: &ModelParams, samples: &[Sample]) -> CliResult {
    let (h, w, c1, c2) = dataset_dims(samples)?;
    let c = params.config();
    if (c.height, c.width, c.alpha_channels, c.beta_channels) != (h, w, c1, c2) {
        return Err(Error::ShapeMismatch(format!(
            "checkpoint expects alpha {:?} / beta {:?}, data has alpha {:?} / beta {:?}",
            (c.height, c.width, c.alpha_channels),
            (c.height, c.width, c.beta_channels),
            (h, w, c1),
            (h, w, c2)
        ))
        .into());
    }
    Ok(())
}

fn class_groups_from(manifest: &Manifest) -> CliResult<Option<ClassGroups>> {
    if !manifest.has_groups() {
        return Ok(None);
    }
    let pairs = manifest.records.iter().filter_map(|r| r.group.map(|g| (r.label, g)));
    Ok(Some(ClassGroups::from_pairs(manifest.classes(), pairs)?))
}

fn cmd_train(a: TrainArgs) -> CliResult {
    let tcfg = TrainConfig {
        lr0: a.lr,
        lr_drop_epoch: a.lr_drop_epoch,
        lr_factor: a.lr_factor,
        weight_decay: a.wd,
        epochs: a.epochs,
        batch_size: a.batch,
        train_fraction: a.split,
        seed: a.seed,
        augment: !a.no_augment,
    };
    tcfg.validate()?;
    let manifest = data::load_manifest(&a.manifest)?;
    let samples = data::load_samples(&manifest)?;
    let (h, w, c1, c2) = dataset_dims(&samples)?;
    let mcfg = ModelConfig {
        height: h,
        width: w,
        alpha_channels: c1,
        beta_channels: c2,
        sketch_dim: a.d,
        blocks: a.blocks,
        classes: manifest.classes(),
    };
    mcfg.validate()?;
    let model_seed = rng::derive_seed(a.seed, "model", 0);
    print_config(
        a.json,
        "train",
        json!({
            "manifest": a.manifest.display().to_string(),
            "out": a.out.display().to_string(),
            "samples": samples.len(),
            "classes": mcfg.classes,
            "label_map": manifest.label_map,
            "grid": [h, w],
            "alpha_channels": c1,
            "beta_channels": c2,
            "d": a.d,
            "blocks": a.blocks,
            "epochs": a.epochs,
            "batch": a.batch,
            "lr": a.lr,
            "lr_drop_epoch": a.lr_drop_epoch,
            "lr_factor": a.lr_factor,
            "wd": a.wd,
            "split": a.split,
            "seed": a.seed,
            "augment": !a.no_augment,
            "metrics": a.metrics.as_ref().map(|p| p.display().to_string()),
        }),
    );

    let split_seed = train::split_seed(a.seed);
    let (train_idx, test_idx) = train::stratified_split_indices(&manifest.labels(), a.split, split_seed)?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| samples[i].clone()).collect::<Vec<_>>();
    let (train_set, test_set) = (pick(&train_idx), pick(&test_idx));
    if let Some(dir) = &a.split_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.clone(),
            source: e,
        })?;
        for (name, idx) in [("train.tsv", &train_idx), ("test.tsv", &test_idx)] {
            let rows: Vec<_> = idx.iter().map(|&i| manifest.records[i].to_row()).collect();
            data::write_manifest(&dir.join(name), &rows, &[format!("split of {}", a.manifest.display())])?;
        }
    }
    let groups = class_groups_from(&manifest)?;
    let init = ModelParams::init(mcfg, model_seed)?;
    if !a.json {
        println!("{}", Metrics::TABLE_HEADER);
    }
    let outcome = train::train_from(init, &train_set, &test_set, &tcfg, groups.as_ref(), |m| {
        if a.json {
            println!("{}", metrics_json(m));
        } else {
            println!("{}", m.table_row());
        }
    })?;
    model::save_checkpoint(&outcome.params, &a.out)?;
    if let Some(path) = &a.metrics {
        let mut text = String::new();
        if a.json {
            for m in &outcome.history {
                text.push_str(&metrics_json(m).to_string());
                text.push('\n');
            }
        } else {
            text.push_str(Metrics::TABLE_HEADER);
            text.push('\n');
            for m in &outcome.history {
                text.push_str(&m.table_row());
                text.push('\n');
            }
        }
        write_atomic(path, text.as_bytes())?;
    }
    let final_top1 = outcome.history.last().and_then(|m| m.top1);
    if a.json {
        println!(
            "{}",
            json!({"record": "final", "top1": final_top1, "checkpoint": a.out.display().to_string()})
        );
    } else {
        match final_top1 {
            Some(t) => println!("final top-1 accuracy: {t:.4}"),
            None => println!("no epochs run; checkpoint holds the initialization"),
        }
        println!("checkpoint written to {}", a.out.display());
    }
    Ok(())
}

fn metrics_json(m: &Metrics) -> Value {
    json!({
        "record": "epoch",
        "epoch": m.epoch,
        "lr": m.lr,
        "loss": m.train_loss,
        "top1": m.top1,
        "group_acc": m.group_accuracy,
        "per_class": m.per_class,
    })
}

fn remap_labels(manifest: &Manifest, reference: &Manifest) -> CliResult<Vec<usize>> {
    manifest
        .records
        .iter()
        .map(|r| {
            reference
                .label_map
                .iter()
                .position(|&l| l == r.original_label)
                .ok_or_else(|| {
                    Failure::Core(Error::Manifest {
                        path: manifest.path.clone(),
                        line: r.line,
                        message: format!(
                            "class label {} is unknown to {}",
                            r.original_label,
                            reference.path.display()
                        ),
                    })
                })
        })
        .collect()
}

fn cmd_eval(a: EvalArgs) -> CliResult {
    print_config(
        a.json,
        "eval",
        json!({
            "manifest": a.manifest.display().to_string(),
            "checkpoint": a.checkpoint.display().to_string(),
            "labels_from": a.labels_from.as_ref().map(|p| p.display().to_string()),
        }),
    );
    let params = model::load_checkpoint(&a.checkpoint)?;
    let manifest = data::load_manifest(&a.manifest)?;
    let mut samples = data::load_samples(&manifest)?;
    check_compatible(&params, &samples)?;
    let label_map = match &a.labels_from {
        Some(p) => {
            let reference = data::load_manifest(p)?;
            for (s, l) in samples.iter_mut().zip(remap_labels(&manifest, &reference)?) {
                s.label = l;
            }
            reference.label_map
        }
        None => manifest.label_map.clone(),
    };
    let classes = params.config().classes;
    if let Some(s) = samples.iter().find(|s| s.label >= classes) {
        return Err(Error::ShapeMismatch(format!(
            "sample {} has class index {} but the checkpoint has {classes} classes",
            s.id, s.label
        ))
        .into());
    }
    let report = train::evaluate_top1(&params, &samples)?;
    if a.json {
        println!(
            "{}",
            json!({"record": "top1", "accuracy": report.accuracy, "correct": report.correct, "total": report.total})
        );
        for (k, acc) in report.per_class.iter().enumerate() {
            println!(
                "{}",
                json!({"record": "class", "class": k, "label": label_map.get(k), "accuracy": acc})
            );
        }
    } else {
        println!(
            "top-1 accuracy: {:.4} ({}/{})",
            report.accuracy, report.correct, report.total
        );
        println!("class\tlabel\taccuracy");
        for (k, acc) in report.per_class.iter().enumerate() {
            let label = label_map.get(k).map(|l| l.to_string()).unwrap_or_else(|| "?".into());
            let acc = acc.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
            println!("{k}\t{label}\t{acc}");
        }
    }
    Ok(())
}

fn cmd_eval_disjoint(a: EvalDisjointArgs) -> CliResult {
    print_config(
        a.json,
        "eval-disjoint",
        json!({
            "manifest": a.manifest.display().to_string(),
            "checkpoint": a.checkpoint.display().to_string(),
            "groups": a.groups.display().to_string(),
        }),
    );
    let params = model::load_checkpoint(&a.checkpoint)?;
    let group_manifest = data::load_manifest(&a.groups)?;
    let groups = class_groups_from(&group_manifest)?.ok_or_else(|| {
        Error::InvalidArgument(format!(
            "{} assigns no groups (all group_id are -1)",
            a.groups.display()
        ))
    })?;
    if groups.classes() != params.config().classes {
        return Err(Error::ShapeMismatch(format!(
            "group manifest defines {} classes, checkpoint has {}",
            groups.classes(),
            params.config().classes
        ))
        .into());
    }
    let manifest = data::load_manifest(&a.manifest)?;
    let samples = data::load_samples(&manifest)?;
    check_compatible(&params, &samples)?;
    let report = train::evaluate_group(&params, &samples, &groups)?;
    if report.unmapped_predictions > 0 {
        eprintln!(
            "warning: {} predictions fell on classes without a group and were counted incorrect",
            report.unmapped_predictions
        );
    }
    if a.json {
        for row in &report.rows {
            println!(
                "{}",
                json!({"record": "group", "group": row.group, "correct": row.correct, "total": row.total, "accuracy": row.accuracy})
            );
        }
        println!(
            "{}",
            json!({"record": "overall", "accuracy": report.overall, "correct": report.correct, "total": report.total, "unmapped_predictions": report.unmapped_predictions})
        );
    } else {
        println!("group\tcorrect\ttotal\taccuracy");
        for row in &report.rows {
            println!("{}\t{}\t{}\t{:.4}", row.group, row.correct, row.total, row.accuracy);
        }
        println!("overall\t{}\t{}\t{:.4}", report.correct, report.total, report.overall);
    }
    Ok(())
}

fn cmd_gen_synth(a: GenSynthArgs) -> CliResult {
    let cfg = SynthConfig {
        classes: a.classes,
        samples_per_class: a.per_class,
        height: a.height,
        width: a.width,
        channels: a.channels,
        noise: a.noise,
        max_shift: a.max_shift,
        seed: a.seed,
        styles_per_group: a.styles_per_group,
    };
    print_config(
        a.json,
        "gen-synth",
        json!({
            "out": a.out.display().to_string(),
            "classes": a.classes,
            "per_class": a.per_class,
            "grid": [a.height, a.width, a.channels],
            "noise": a.noise,
            "max_shift": a.max_shift,
            "styles_per_group": a.styles_per_group,
            "split": a.split,
            "seed": a.seed,
        }),
    );
    let report = data::generate_synthetic(&cfg, &a.out, a.split)?;
    if a.json {
        println!(
            "{}",
            json!({"record": "synth", "manifest": report.manifest_path.display().to_string(), "samples": report.samples, "nearest_centroid_floor": report.nearest_centroid_floor})
        );
    } else {
        println!(
            "wrote {} samples, manifest {}",
            report.samples,
            report.manifest_path.display()
        );
        println!(
            "nearest-centroid floor (split {}, seed {}): {:.4}",
            report.split_fraction, a.seed, report.nearest_centroid_floor
        );
    }
    Ok(())
}

fn cmd_check_sketch(a: CheckSketchArgs) -> CliResult {
    print_config(
        a.json,
        "check-sketch",
        json!({"n": a.n, "d": a.d, "trials": a.trials, "seed": a.seed}),
    );
    let eq = checks::sketch_equivalence(a.n, a.d, a.trials, a.seed)?;
    let ub = checks::sketch_unbiasedness(a.n, a.d, a.trials, a.seed)?;
    if a.json {
        println!(
            "{}",
            json!({"record": "equivalence", "report": eq, "passed": eq.passed()})
        );
        println!(
            "{}",
            json!({"record": "unbiasedness", "report": ub, "passed": ub.passed()})
        );
    } else {
        println!(
            "equivalence: {} trials, max |tensor_sketch - oracle| = {:.3e} (tolerance {:.0e}) {}",
            eq.trials,
            eq.max_deviation,
            eq.tolerance,
            if eq.passed() { "PASS" } else { "FAIL" }
        );
        match (ub.std_error, ub.z_score) {
            (Some(se), Some(z)) => println!(
                "unbiasedness: mean <cs(x),cs(y)> = {:.6}, <x,y> = {:.6}, std error {:.6}, deviation {:.3} SE (bound 3) {}",
                ub.mean,
                ub.exact,
                se,
                z,
                if z <= 3.0 { "PASS" } else { "FAIL" }
            ),
            _ => println!(
                "unbiasedness: single-trial estimate <cs(x),cs(y)> = {:.6}, <x,y> = {:.6} (no statistical assertion)",
                ub.mean, ub.exact
            ),
        }
    }
    let mut failures = Vec::new();
    if !eq.passed() {
        failures.push(format!("equivalence (worst seed {})", eq.worst_seed));
    }
    if ub.passed() == Some(false) {
        failures.push(format!("unbiasedness (seed {})", ub.seed));
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Failure::CheckFailed(failures.join(", ")))
    }
}

fn cmd_check_grad(a: CheckGradArgs) -> CliResult {
    print_config(a.json, "check-grad", json!({"seed": a.seed, "instances": a.instances}));
    let results = checks::gradient_suite(a.seed, a.instances)?;
    let mut failures = Vec::new();
    for r in &results {
        if a.json {
            println!("{}", json!({"record": "grad", "report": r, "passed": r.passed()}));
        } else {
            println!(
                "{:<24} {:>3} instances  max rel err {:.3e}  (tol {:.0e})  {}",
                r.name,
                r.instances,
                r.max_relative_error,
                r.tolerance,
                if r.passed() { "PASS" } else { "FAIL" }
            );
        }
        if !r.passed() {
            failures.push(format!("{} (seed {})", r.name, r.worst_seed));
        }
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Failure::CheckFailed(failures.join(", ")))
    }
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::EvalDisjoint(a) => cmd_eval_disjoint(a),
        Command::GenSynth(a) => cmd_gen_synth(a),
        Command::CheckSketch(a) => cmd_check_sketch(a),
        Command::CheckGrad(a) => cmd_check_grad(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.exit_code())
        }
    }
}
