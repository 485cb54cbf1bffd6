//! `partscope`: generate synthetic data, train part segmenters, evaluate
//! them and the baselines, and render overlays.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};

use partscope::baselines::{fit_sample, kmeans_fit, MAX_FIT_SAMPLES};
use partscope::datasets::synthetic::{generate, SyntheticSpec};
use partscope::datasets::{self, load_saliency_masks, write_image, DatasetManifest, Sample, Split};
use partscope::error::Error;
use partscope::evaluate::{build_report, kmeans_predictions, segmenter_predictions, Prediction};
use partscope::features::{FeatureProvider, Provider};
use partscope::metrics::{baseline_landmarks, LandmarkBaseline};
use partscope::segmenter::Segmenter;
use partscope::trainer::{train, TrainConfig};
use partscope::visualize::{overlay, DEFAULT_ALPHA};

const EXIT_USAGE: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

#[derive(Parser)]
#[command(name = "partscope", version, about = "Self-supervised object part discovery")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic part dataset and print its manifest path.
    SynthGenerate {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a segmenter; writes the checkpoint, optimizer state and loss log.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Dataset manifest.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Train only on samples of this class.
        #[arg(long)]
        class: Option<String>,
        /// Replace ground-truth foregrounds with `<dir>/<id>.png`.
        #[arg(long)]
        saliency: Option<PathBuf>,
        /// Continue from the checkpoint already in `--out`.
        #[arg(long)]
        resume: bool,
    },
    /// Score a checkpoint and write a metric report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        class: Option<String>,
    },
    /// Score one of the baselines through the same metric pipeline.
    Baseline {
        #[arg(long, value_enum)]
        kind: BaselineKind,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Training configuration supplying K, the feature provider and the seed.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Keypoint index for `single-kp`.
        #[arg(long, default_value_t = 0)]
        keypoint: usize,
        #[arg(long)]
        class: Option<String>,
    },
    /// Write part overlays for the first `n` images of a split.
    Visualize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value = "test")]
        split: String,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineKind {
    Kmeans,
    Midpoint,
    KpCenter,
    SingleKp,
}

/// A missing input is a usage error, not an I/O failure.
fn require(path: &Path, what: &str) -> anyhow::Result<()> {
    if !path.exists() {
        return Err(anyhow::Error::new(UsageError(format!("{what} {} does not exist", path.display()))));
    }
    Ok(())
}

#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(message: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(message.into()))
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return EXIT_USAGE;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::NonFinite { .. } => EXIT_NUMERIC,
                e if e.is_io() => EXIT_IO,
                _ => EXIT_USAGE,
            };
        }
        if cause.is::<std::io::Error>() {
            return EXIT_IO;
        }
    }
    EXIT_USAGE
}

fn parse_split(s: &str) -> anyhow::Result<Split> {
    s.parse::<Split>().map_err(|e| usage(e.to_string()))
}

fn load_manifest(path: &Path) -> anyhow::Result<DatasetManifest> {
    require(path, "manifest")?;
    Ok(DatasetManifest::load(path)?)
}

fn load_checkpoint(path: &Path) -> anyhow::Result<Segmenter> {
    require(path, "checkpoint")?;
    Ok(Segmenter::load_checkpoint(path)?.0)
}

fn synth_generate(spec: &Path, out: &Path) -> anyhow::Result<()> {
    require(spec, "spec file")?;
    let text = std::fs::read_to_string(spec).with_context(|| format!("reading {}", spec.display()))?;
    let spec = SyntheticSpec::from_toml(&text).with_context(|| format!("in {}", spec.display()))?;
    let manifest = generate(&spec, out)?;
    println!("{}", manifest.display());
    Ok(())
}

fn train_cmd(
    config: &Path,
    data: &Path,
    out: &Path,
    class: Option<&str>,
    saliency: Option<&Path>,
    resume: bool,
) -> anyhow::Result<()> {
    require(config, "config file")?;
    let config = TrainConfig::load(config).with_context(|| format!("in {}", config.display()))?;
    let manifest = load_manifest(data)?;
    let mut samples = datasets::load(&manifest, Split::Train, class)?;
    if samples.is_empty() {
        bail!(usage(format!("no training samples{}", class.map(|c| format!(" of class `{c}`")).unwrap_or_default())));
    }
    if let Some(dir) = saliency {
        require(dir, "saliency directory")?;
        load_saliency_masks(dir, &mut samples)?;
    }
    log::info!("training on {} images", samples.len());
    let (_, outcome) = train(config, &samples, out, resume)?;
    println!("{}", outcome.checkpoint.display());
    Ok(())
}

fn eval_cmd(checkpoint: &Path, data: &Path, split: &str, report: &Path, class: Option<&str>) -> anyhow::Result<()> {
    let segmenter = load_checkpoint(checkpoint)?;
    let split = parse_split(split)?;
    let manifest = load_manifest(data)?;
    let test = datasets::load(&manifest, split, class)?;
    // The keypoint regression is fitted on the training split.
    let train = if split == Split::Train {
        test.clone()
    } else {
        datasets::load(&manifest, Split::Train, class)?
    };
    let train = if manifest.has_keypoints(Split::Train) { train } else { Vec::new() };
    let r = build_report(
        &train,
        &segmenter_predictions(&segmenter, &train)?,
        &test,
        &segmenter_predictions(&segmenter, &test)?,
    )?;
    r.save(report)?;
    print!("{}", r.render());
    Ok(())
}

fn baseline_cmd(
    kind: BaselineKind,
    data: &Path,
    report: &Path,
    split: &str,
    config: Option<&Path>,
    keypoint: usize,
    class: Option<&str>,
) -> anyhow::Result<()> {
    let split = parse_split(split)?;
    let config = match config {
        Some(path) => {
            require(path, "config file")?;
            TrainConfig::load(path).with_context(|| format!("in {}", path.display()))?
        }
        None => TrainConfig::default(),
    };
    let manifest = load_manifest(data)?;
    if !matches!(kind, BaselineKind::Kmeans) && !(manifest.has_keypoints(Split::Train) && manifest.has_keypoints(split)) {
        bail!(usage("keypoint baselines need keypoint files for every sample"));
    }
    let train = datasets::load(&manifest, Split::Train, class)?;
    let test = datasets::load(&manifest, split, class)?;
    let (train_pred, test_pred) = match kind {
        BaselineKind::Kmeans => {
            let provider = Provider::new(config.provider_spec())?;
            let extract = |set: &[Sample]| -> anyhow::Result<Vec<_>> {
                Ok(set.iter().map(|s| provider.extract(&s.image, Some(&s.id))).collect::<Result<Vec<_>, _>>()?)
            };
            let (train_f, test_f) = (extract(&train)?, extract(&test)?);
            let pooled: Vec<_> = train_f.iter().cloned().zip(train.iter().map(|s| s.fg.clone())).collect();
            let model = kmeans_fit(&fit_sample(&pooled, MAX_FIT_SAMPLES, config.seed), config.parts, config.seed)?;
            log::info!("k-means converged after {} iterations, inertia {:.4}", model.iterations, model.inertia);
            (kmeans_predictions(&model.centroids, &train_f, &train)?, kmeans_predictions(&model.centroids, &test_f, &test)?)
        }
        other => {
            let which = match other {
                BaselineKind::Midpoint => LandmarkBaseline::ImageMidpoint,
                BaselineKind::KpCenter => LandmarkBaseline::KeypointCenter,
                _ => LandmarkBaseline::SingleKeypoint(keypoint),
            };
            let preds = |set: &[Sample]| -> Vec<Prediction> {
                let kps: Vec<_> = set.iter().map(|s| s.keypoints.clone().expect("checked")).collect();
                baseline_landmarks(which, &kps).into_iter().map(|landmarks| Prediction { labels: None, landmarks }).collect()
            };
            (preds(&train), preds(&test))
        }
    };
    let r = build_report(&train, &train_pred, &test, &test_pred)?;
    r.save(report)?;
    print!("{}", r.render());
    Ok(())
}

fn visualize_cmd(checkpoint: &Path, data: &Path, out: &Path, n: usize, split: &str) -> anyhow::Result<()> {
    let segmenter = load_checkpoint(checkpoint)?;
    let split = parse_split(split)?;
    let manifest = load_manifest(data)?;
    if n == 0 {
        return Ok(());
    }
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let entries: Vec<_> = manifest.entries.iter().filter(|e| e.split == split).take(n).collect();
    for entry in entries {
        let sample = datasets::load_sample(&manifest, entry)?;
        let mask = segmenter.predict(&sample.image);
        let image = overlay(&sample.image, &mask, &sample.fg, DEFAULT_ALPHA)?;
        let path = out.join(format!("{}.png", sample.id));
        write_image(&path, &image)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::SynthGenerate { spec, out } => synth_generate(&spec, &out),
        Command::Train { config, data, out, class, saliency, resume } => {
            train_cmd(&config, &data, &out, class.as_deref(), saliency.as_deref(), resume)
        }
        Command::Eval { checkpoint, data, split, report, class } => {
            eval_cmd(&checkpoint, &data, &split, &report, class.as_deref())
        }
        Command::Baseline { kind, data, report, split, config, keypoint, class } => {
            baseline_cmd(kind, &data, &report, &split, config.as_deref(), keypoint, class.as_deref())
        }
        Command::Visualize { checkpoint, data, out, n, split } => visualize_cmd(&checkpoint, &data, &out, n, &split),
    }
}

fn configure_threads() -> anyhow::Result<()> {
    let Ok(value) = std::env::var("PARTSCOPE_THREADS") else { return Ok(()) };
    let threads: usize = value
        .parse()
        .ok()
        .filter(|&t| t > 0)
        .ok_or_else(|| usage(format!("PARTSCOPE_THREADS must be a positive integer, got `{value}`")))?;
    rayon::ThreadPoolBuilder::new().num_threads(threads).build_global().context("configuring the thread pool")?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match configure_threads().and_then(|()| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
