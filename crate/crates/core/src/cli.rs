//! Command-line front end. [`run`] parses arguments and returns the process exit code.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::estimators::{build_default_weights, MCNetSpec, SCNetSpec};
use crate::gli::{self, LabelerConfig, Threshold};
use crate::gradsuite::{format_table, run_suite, SuiteOptions};
use crate::image::RgbImage;
use crate::metrics::{evaluate_image, MetricReport};
use crate::persistence::{
    encode_image, load_image, load_store, save_store, write_atomic, NamedTensorStore,
};
use crate::pipeline::{
    enhance, ClassifierMode, Evidence, FusionWeights, ModelBundle, CLASSIFIER_FILE,
    MCNET_COLOR_FILE, MCNET_ILLUM_FILE, SCNET_GLOBAL_FILE, SCNET_LOCAL_FILE,
};
use crate::route::Route;
use crate::slcformer::{classify, SLCformerConfig};
use crate::trainer::{
    history_csv, preset, synthetic_classifier_set, synthetic_pairs, train_network,
    ClassifierObjective, EstimatorLoss, LabeledInput, McnetObjective, Objective, Pair, PresetKind,
    ScnetObjective, TrainConfig, TrainOutcome,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FATAL: i32 = 1;
pub const EXIT_PARTIAL: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "alen", version, about = "Adaptive low-light image enhancement")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Enhance one image or every PNG/PPM in a directory.
    Enhance(EnhanceArgs),
    /// Print `path,label,evidence` for each input.
    Classify(ClassifyArgs),
    /// Label a directory with the histogram rule and write a CSV manifest.
    LabelDataset(LabelDatasetArgs),
    /// Train one network from a preset.
    Train(TrainArgs),
    /// Score enhanced images and write CSV and Markdown reports.
    Evaluate(EvaluateArgs),
    /// Compare analytic and finite-difference gradients for every operation.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug, Clone)]
pub struct LabelerArgs {
    /// Minimum bin count: an integer count or a fraction of the pixel count.
    #[arg(long, default_value = "0.001")]
    pub threshold: Threshold,
    /// Thresholds below this intensity route to global enhancement.
    #[arg(long, default_value_t = 128)]
    pub cutoff: u8,
}

impl LabelerArgs {
    fn config(&self) -> LabelerConfig {
        LabelerConfig {
            threshold: self.threshold,
            intensity_cutoff: self.cutoff,
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    /// Directory of weight stores. Without it, weights are initialized from `--seed`.
    #[arg(long)]
    pub bundle: Option<PathBuf>,
    #[arg(long, default_value = "histogram")]
    pub classifier: ClassifierMode,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub labeler: LabelerArgs,
}

#[derive(Args, Debug)]
pub struct EnhanceArgs {
    /// Input image or directory.
    pub input: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 0.5)]
    pub lambda_g: f64,
    #[arg(long, default_value_t = 0.5)]
    pub lambda_l: f64,
    #[arg(long, default_value_t = 0.5)]
    pub lambda_c: f64,
    /// Worker threads.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    pub jobs: u32,
}

#[derive(Args, Debug)]
pub struct ClassifyArgs {
    /// Input image or directory.
    pub input: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    pub jobs: u32,
}

#[derive(Args, Debug)]
pub struct LabelDatasetArgs {
    pub dir: PathBuf,
    /// Output CSV.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub labeler: LabelerArgs,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub preset: String,
    /// Training data. Estimators read `low/` and `high/` with matching file
    /// names; the classifier labels every image in the directory.
    #[arg(
        long,
        conflicts_with = "synthetic",
        required_unless_present = "synthetic"
    )]
    pub data: Option<PathBuf>,
    /// Generate this many synthetic samples instead of reading `--data`.
    #[arg(long)]
    pub synthetic: Option<usize>,
    /// Side length of synthetic samples.
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    /// Output directory for the weights and loss history.
    #[arg(long)]
    pub out: PathBuf,
    /// Stop after this many optimizer steps.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Write a checkpoint every N epochs.
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub labeler: LabelerArgs,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    pub enhanced: PathBuf,
    /// Ground-truth directory; enables PSNR, SSIM, UQI and color difference.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// Unenhanced inputs; enables lightness order error.
    #[arg(long)]
    pub original: Option<PathBuf>,
    /// Output directory for `metrics.csv` and `metrics.md`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, hide = true)]
    pub inject_bug: bool,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_FATAL } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() {
                err.write_all(text.as_bytes())
            } else {
                out.write_all(text.as_bytes())
            };
            return code;
        }
    };
    match dispatch(cli.command, out, err) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_FATAL
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    match cmd {
        Command::Enhance(a) => cmd_enhance(&a, out, err),
        Command::Classify(a) => cmd_classify(&a, out, err),
        Command::LabelDataset(a) => cmd_label_dataset(&a, out, err),
        Command::Train(a) => cmd_train(&a, out),
        Command::Evaluate(a) => cmd_evaluate(&a, out, err),
        Command::Gradcheck(a) => cmd_gradcheck(&a, out),
    }
}

fn inputs(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_dir() {
        gli::image_files(path)
    } else if path.is_file() {
        Ok(vec![path.to_path_buf()])
    } else {
        Err(Error::InvalidArgument(format!(
            "{} does not exist",
            path.display()
        )))
    }
}

fn pool(jobs: u32) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs as usize)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("cannot start {jobs} workers: {e}")))
}

/// Exit code for a batch where `failed` of `total` units failed.
fn batch_code(total: usize, failed: usize) -> i32 {
    match failed {
        0 => EXIT_OK,
        f if f == total => EXIT_FATAL,
        _ => EXIT_PARTIAL,
    }
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn model_bundle(m: &ModelArgs) -> Result<ModelBundle> {
    let cfg = SLCformerConfig::default();
    let mut bundle = match &m.bundle {
        Some(dir) => ModelBundle::load_dir(dir, m.classifier, cfg)?,
        None => {
            log::warn!(
                "no --bundle given; using weights initialized from seed {}",
                m.seed
            );
            ModelBundle::seeded(m.seed, m.classifier, cfg)
        }
    };
    bundle.labeler = m.labeler.config();
    Ok(bundle)
}

#[derive(Serialize)]
struct Sidecar<'a> {
    input: String,
    output: String,
    label: Route,
    evidence: Evidence,
    weights: FusionWeights,
    classifier: &'a str,
    stores: BTreeMap<&'static str, String>,
}

fn cmd_enhance(a: &EnhanceArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    let weights = FusionWeights {
        lambda_g: a.lambda_g,
        lambda_l: a.lambda_l,
        lambda_c: a.lambda_c,
    };
    weights.validate()?;
    let files = inputs(&a.input)?;
    let bundle = model_bundle(&a.model)?;
    bundle.validate()?;
    let stores: BTreeMap<_, _> = bundle.digests().into_iter().collect();
    let mode = match a.model.classifier {
        ClassifierMode::Network => "network",
        ClassifierMode::Histogram => "histogram",
    };
    std::fs::create_dir_all(&a.out)?;

    let work = |path: &PathBuf| -> Result<(PathBuf, Vec<u8>, Vec<u8>)> {
        let img = load_image::<f64>(path)?;
        let r = enhance(&img, &bundle, &weights)?;
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let target = a.out.join(format!("{stem}_alen.png"));
        let png = encode_image(&r.output, &target)?;
        let sidecar = Sidecar {
            input: file_name(path),
            output: file_name(&target),
            label: r.decision.route,
            evidence: r.decision.evidence,
            weights: r.weights_used,
            classifier: mode,
            stores: stores.clone(),
        };
        let mut json = serde_json::to_vec_pretty(&sidecar)?;
        json.push(b'\n');
        Ok((target, png, json))
    };
    let results: Vec<_> = pool(a.jobs)?.install(|| files.par_iter().map(work).collect());

    let mut failed = 0;
    for (path, r) in files.iter().zip(results) {
        match r.and_then(|(target, png, json)| {
            write_atomic(&target, &png)?;
            write_atomic(&target.with_extension("json"), &json)?;
            Ok(target)
        }) {
            Ok(target) => writeln!(out, "{}", target.display())?,
            Err(e) => {
                failed += 1;
                writeln!(err, "{}: {e}", path.display())?;
            }
        }
    }
    Ok(batch_code(files.len(), failed))
}

fn cmd_classify(a: &ClassifyArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    let files = inputs(&a.input)?;
    let m = &a.model;
    let cfg = SLCformerConfig::default();
    let weights: Option<NamedTensorStore> = match m.classifier {
        ClassifierMode::Histogram => None,
        ClassifierMode::Network => {
            let w = match &m.bundle {
                Some(dir) => load_store(&dir.join(CLASSIFIER_FILE))?,
                None => {
                    log::warn!(
                        "no --bundle given; using classifier weights initialized from seed {}",
                        m.seed
                    );
                    build_default_weights(&cfg, m.seed)
                }
            };
            cfg.validate_weights(&w)?;
            Some(w)
        }
    };
    let labeler = m.labeler.config();
    let work = |path: &PathBuf| -> Result<String> {
        let img = load_image::<f64>(path)?;
        Ok(match &weights {
            Some(w) => {
                let l = classify(&img, w, &cfg)?;
                format!("{},{},{}", path.display(), l.label, l.probability)
            }
            None => {
                let (route, i_thr) = gli::label(&img, &labeler);
                let i_thr = i_thr.map_or_else(|| "none".to_string(), |i| i.to_string());
                format!("{},{},{}", path.display(), route, i_thr)
            }
        })
    };
    let results: Vec<_> = pool(a.jobs)?.install(|| files.par_iter().map(work).collect());
    let mut failed = 0;
    for (path, r) in files.iter().zip(results) {
        match r {
            Ok(line) => writeln!(out, "{line}")?,
            Err(e) => {
                failed += 1;
                writeln!(err, "{}: {e}", path.display())?;
            }
        }
    }
    Ok(batch_code(files.len(), failed))
}

fn cmd_label_dataset(
    a: &LabelDatasetArgs,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> Result<i32> {
    let manifest = gli::label_dataset(&a.dir, &a.labeler.config())?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    write_atomic(&a.out, &manifest.to_csv()?)?;
    for (path, e) in &manifest.failures {
        writeln!(err, "{}: {e}", path.display())?;
    }
    let global = manifest
        .rows
        .iter()
        .filter(|r| r.label == Route::Global)
        .count();
    writeln!(
        out,
        "global={} local={} failed={}",
        global,
        manifest.rows.len() - global,
        manifest.failures.len()
    )?;
    Ok(batch_code(
        manifest.rows.len() + manifest.failures.len(),
        manifest.failures.len(),
    ))
}

fn load_pairs(dir: &Path) -> Result<Vec<Pair>> {
    let (low, high) = (dir.join("low"), dir.join("high"));
    let mut pairs = Vec::new();
    for path in gli::image_files(&low)? {
        let target = high.join(path.file_name().expect("listed file has a name"));
        if !target.is_file() {
            return Err(Error::InvalidArgument(format!(
                "{} has no counterpart in {}",
                path.display(),
                high.display()
            )));
        }
        let pair = Pair {
            input: load_image(&path)?,
            target: load_image(&target)?,
        };
        if (pair.input.height(), pair.input.width()) != (pair.target.height(), pair.target.width())
        {
            return Err(Error::InvalidArgument(format!(
                "{} and its target differ in size",
                path.display()
            )));
        }
        pairs.push(pair);
    }
    Ok(pairs)
}

fn load_labeled(dir: &Path, labeler: &LabelerConfig) -> Result<Vec<(RgbImage, Route)>> {
    gli::image_files(dir)?
        .iter()
        .map(|p| {
            let img = load_image(p)?;
            let (route, _) = gli::label(&img, labeler);
            Ok((img, route))
        })
        .collect()
}

/// Drops a crop that would not fit the smallest sample.
fn fit_crop(cfg: &mut TrainConfig, min_side: usize) {
    if cfg.crop.is_some_and(|c| c > min_side) {
        log::info!(
            "crop {:?} exceeds the {min_side}px training images; training uncropped",
            cfg.crop
        );
        cfg.crop = None;
    }
}

fn run_training<O: Objective<f64>>(
    objective: O,
    weights: NamedTensorStore,
    data: &[O::Sample],
    cfg: &TrainConfig,
    checkpoints: &Path,
) -> Result<TrainOutcome> {
    train_network(
        objective,
        weights,
        data,
        cfg,
        cfg.checkpoint_every.map(|_| checkpoints),
    )
}

fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> Result<i32> {
    let p = preset(&a.preset)?;
    let mut cfg = p.config.clone();
    cfg.seed = a.seed;
    if let Some(lr) = a.lr {
        cfg.learning_rate = lr;
    }
    if let Some(b) = a.batch_size {
        cfg.batch_size = b;
    }
    cfg.checkpoint_every = a.checkpoint_every;
    cfg.max_steps = a.steps;
    if a.size == 0 {
        return Err(Error::InvalidArgument("--size must be positive".into()));
    }

    let (file, stem) = match p.kind {
        PresetKind::Classifier => (CLASSIFIER_FILE, "classifier"),
        PresetKind::ScnetLocal => (SCNET_LOCAL_FILE, "scnet_local"),
        PresetKind::ScnetGlobal => (SCNET_GLOBAL_FILE, "scnet_global"),
        PresetKind::McnetIllum => (MCNET_ILLUM_FILE, "mcnet_illum"),
        PresetKind::McnetColor => (MCNET_COLOR_FILE, "mcnet_color"),
    };
    let checkpoints = a.out.join(format!("{stem}_checkpoints"));

    let outcome = if p.kind == PresetKind::Classifier {
        let ccfg = SLCformerConfig::default();
        let images = match (a.synthetic, &a.data) {
            (Some(n), _) => synthetic_classifier_set(n, a.size, a.seed),
            (None, Some(dir)) => load_labeled(dir, &a.labeler.config())?,
            (None, None) => unreachable!("clap requires one of --data and --synthetic"),
        };
        let data = images
            .iter()
            .map(|(img, route)| LabeledInput::new(img, *route, &ccfg))
            .collect::<Result<Vec<_>>>()?;
        cfg.crop = None;
        finish_config(&mut cfg, a, data.len())?;
        let weights = build_default_weights(&ccfg, a.seed);
        run_training(
            ClassifierObjective { cfg: ccfg },
            weights,
            &data,
            &cfg,
            &checkpoints,
        )?
    } else {
        let pairs = match (a.synthetic, &a.data) {
            (Some(n), _) => synthetic_pairs(n, a.size, 0.0, a.seed),
            (None, Some(dir)) => load_pairs(dir)?,
            (None, None) => unreachable!("clap requires one of --data and --synthetic"),
        };
        let min_side = pairs
            .iter()
            .map(|p| p.input.height().min(p.input.width()))
            .min()
            .unwrap_or(0);
        fit_crop(&mut cfg, min_side);
        finish_config(&mut cfg, a, pairs.len())?;
        match p.kind {
            PresetKind::ScnetLocal => run_training(
                ScnetObjective {
                    loss: EstimatorLoss::Local,
                },
                build_default_weights(&SCNetSpec, a.seed),
                &pairs,
                &cfg,
                &checkpoints,
            )?,
            PresetKind::ScnetGlobal => run_training(
                ScnetObjective {
                    loss: EstimatorLoss::global_or_color(),
                },
                build_default_weights(&SCNetSpec, a.seed),
                &pairs,
                &cfg,
                &checkpoints,
            )?,
            _ => run_training(
                McnetObjective {
                    loss: EstimatorLoss::global_or_color(),
                },
                build_default_weights(&MCNetSpec, a.seed),
                &pairs,
                &cfg,
                &checkpoints,
            )?,
        }
    };

    std::fs::create_dir_all(&a.out)?;
    let weights_path = a.out.join(file);
    save_store(&outcome.weights, &weights_path)?;
    write_atomic(
        &a.out.join(format!("{stem}_loss.csv")),
        &history_csv(&outcome.history)?,
    )?;
    writeln!(
        out,
        "preset={} steps={} epochs={}",
        p.name,
        outcome.steps,
        outcome.history.len()
    )?;
    writeln!(
        out,
        "initial_loss={:.6} final_loss={:.6}",
        outcome.initial_loss, outcome.final_loss
    )?;
    writeln!(
        out,
        "weights={} sha256={}",
        weights_path.display(),
        outcome.weights.digest()
    )?;
    Ok(EXIT_OK)
}

/// Applies `--epochs`, or enough epochs to spend `--steps`, then validates.
fn finish_config(cfg: &mut TrainConfig, a: &TrainArgs, samples: usize) -> Result<()> {
    if samples == 0 {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    match (a.epochs, a.steps) {
        (Some(e), _) => cfg.epochs = e,
        (None, Some(s)) => {
            let per_epoch = samples.div_ceil(cfg.batch_size.max(1));
            cfg.epochs = cfg.epochs.max(s.div_ceil(per_epoch));
        }
        (None, None) => {}
    }
    cfg.validate()
}

/// Finds the counterpart of `enhanced` in `dir`: same file name, or the same
/// stem once an `_alen` suffix is removed.
fn counterpart(enhanced: &Path, dir: &Path) -> Option<PathBuf> {
    let exact = dir.join(enhanced.file_name()?);
    if exact.is_file() {
        return Some(exact);
    }
    let stem = enhanced.file_stem()?.to_string_lossy();
    let base = stem.strip_suffix("_alen").unwrap_or(&stem);
    ["png", "ppm", "PNG", "PPM"]
        .iter()
        .map(|ext| dir.join(format!("{base}.{ext}")))
        .find(|p| p.is_file())
}

fn cmd_evaluate(a: &EvaluateArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    let files = gli::image_files(&a.enhanced)?;
    for d in [&a.reference, &a.original].into_iter().flatten() {
        if !d.is_dir() {
            return Err(Error::InvalidArgument(format!(
                "{} is not a directory",
                d.display()
            )));
        }
    }
    let mut report = MetricReport::default();
    let mut failed = 0;
    for path in &files {
        let row = (|| -> Result<_> {
            let enhanced = load_image::<f64>(path)?;
            let find = |dir: &Option<PathBuf>| -> Result<Option<RgbImage>> {
                match dir {
                    None => Ok(None),
                    Some(d) => match counterpart(path, d) {
                        Some(p) => load_image(&p).map(Some),
                        None => Err(Error::InvalidArgument(format!(
                            "no counterpart in {}",
                            d.display()
                        ))),
                    },
                }
            };
            let reference = find(&a.reference)?;
            let original = find(&a.original)?;
            evaluate_image(
                &file_name(path),
                &enhanced,
                reference.as_ref(),
                original.as_ref(),
            )
        })();
        match row {
            Ok(r) => report.rows.push(r),
            Err(e) => {
                failed += 1;
                writeln!(err, "{}: {e}", path.display())?;
            }
        }
    }
    std::fs::create_dir_all(&a.out)?;
    write_atomic(&a.out.join("metrics.csv"), &report.to_csv()?)?;
    let md = report.to_markdown();
    write_atomic(&a.out.join("metrics.md"), md.as_bytes())?;
    out.write_all(md.as_bytes())?;
    Ok(batch_code(files.len(), failed))
}

fn cmd_gradcheck(a: &GradcheckArgs, out: &mut dyn Write) -> Result<i32> {
    let opts = SuiteOptions {
        seed: a.seed,
        relu_fault: a.inject_bug.then_some(1.01),
        ..SuiteOptions::default()
    };
    let rows = run_suite(&opts)?;
    out.write_all(format_table(&rows).as_bytes())?;
    let failed = rows.iter().filter(|r| !r.passed).count();
    writeln!(out, "{} of {} rows passed", rows.len() - failed, rows.len())?;
    Ok(if failed == 0 { EXIT_OK } else { EXIT_FATAL })
}
