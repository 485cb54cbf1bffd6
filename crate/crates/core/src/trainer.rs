//! Mini-batch optimisation of the segmenter against the weighted objective.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::Sample;
use crate::error::{Error, Result};
use crate::features::{FeatureProvider, FeatureProviderSpec, Provider, ProviderKind};
use crate::losses::{
    evaluate, BatchDescriptors, DescriptorObjective, LossBreakdown, LossWeights, ObjectiveConfig, ObjectiveItem,
    TargetAssignment, TransformedView,
};
use crate::nn::ConvGrad;
use crate::optim::{Optimizer, OptimizerKind, OPTIMIZER_MAGIC};
use crate::params::ParamFile;
use crate::segmenter::{resample_foreground, Segmenter, SegmenterSpec};
use crate::transforms::{apply_to_image, sample_transform, warp_foreground, AugmentConfig, TransformSpec};
use crate::types::{FeatureMap, ForegroundMask, Image, Tensor3};

pub const CHECKPOINT_FILE: &str = "checkpoint.pseg";
pub const OPTIMIZER_FILE: &str = "optimizer.popt";
pub const LOSS_LOG_FILE: &str = "losses.csv";
pub const LOSS_LOG_HEADER: &str = "step,loss_total,loss_f,loss_c,loss_v,loss_e";

/// Redraws allowed when a transform leaves no foreground inside the view.
const TRANSFORM_RETRIES: usize = 16;

/// Training configuration, read from a flat TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    #[serde(rename = "K")]
    pub parts: usize,
    pub batch_size: usize,
    pub steps: u64,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
    pub lambda_feature: f64,
    pub lambda_contrastive: f64,
    pub lambda_visual: f64,
    pub lambda_equivariance: f64,
    pub temperature: f64,
    pub use_l2_instead_of_contrastive: bool,
    pub contrastive_same_image_views: bool,
    pub max_rotation_deg: f64,
    pub min_scale: f64,
    pub max_scale: f64,
    pub max_translation: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    /// Mask side length as a fraction of the image side length.
    pub resolution: f64,
    pub provider: ProviderKind,
    pub provider_layers: Vec<String>,
    pub provider_seed: u64,
    pub provider_weights: Option<PathBuf>,
    pub provider_directory: Option<PathBuf>,
    pub seed: u64,
    /// Write a checkpoint every this many steps; 0 writes only the final one.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let aug = AugmentConfig::default();
        let w = LossWeights::default();
        Self {
            parts: 4,
            batch_size: 8,
            steps: 2000,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::AdaptiveMoments,
            momentum: 0.9,
            lambda_feature: w.feature,
            lambda_contrastive: w.contrastive,
            lambda_visual: w.visual,
            lambda_equivariance: w.equivariance,
            temperature: w.temperature,
            use_l2_instead_of_contrastive: false,
            contrastive_same_image_views: false,
            max_rotation_deg: aug.max_rotation_deg,
            min_scale: aug.min_scale,
            max_scale: aug.max_scale,
            max_translation: aug.max_translation,
            brightness: aug.brightness,
            contrast: aug.contrast,
            saturation: aug.saturation,
            resolution: 1.0,
            provider: ProviderKind::ToyCnn,
            provider_layers: Vec::new(),
            provider_seed: 0,
            provider_weights: None,
            provider_directory: None,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::toml(text, &e))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config serialises")
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            feature: self.lambda_feature,
            contrastive: self.lambda_contrastive,
            visual: self.lambda_visual,
            equivariance: self.lambda_equivariance,
            temperature: self.temperature,
        }
    }

    pub fn augment(&self) -> AugmentConfig {
        AugmentConfig {
            max_rotation_deg: self.max_rotation_deg,
            min_scale: self.min_scale,
            max_scale: self.max_scale,
            max_translation: self.max_translation,
            brightness: self.brightness,
            contrast: self.contrast,
            saturation: self.saturation,
        }
    }

    pub fn segmenter_spec(&self) -> SegmenterSpec {
        SegmenterSpec { resolution: self.resolution, ..SegmenterSpec::new(self.parts) }
    }

    pub fn provider_spec(&self) -> FeatureProviderSpec {
        FeatureProviderSpec {
            kind: self.provider,
            layer_names: self.provider_layers.clone(),
            frozen: true,
            seed: self.provider_seed,
            weights: self.provider_weights.clone(),
            directory: self.provider_directory.clone(),
        }
    }

    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            weights: self.weights(),
            descriptor_objective: if self.use_l2_instead_of_contrastive {
                DescriptorObjective::L2
            } else {
                DescriptorObjective::Contrastive
            },
            same_image_views: self.contrastive_same_image_views,
            ..ObjectiveConfig::default()
        }
    }

    /// Whether each step also runs the segmenter on a transformed copy.
    pub fn needs_view(&self) -> bool {
        self.lambda_equivariance > 0.0 || (self.lambda_contrastive > 0.0 && self.contrastive_same_image_views)
    }

    /// Images needed per step for the cross-image descriptor term.
    fn min_batch(&self) -> usize {
        if self.lambda_contrastive > 0.0 && !self.contrastive_same_image_views {
            2
        } else {
            1
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.segmenter_spec().validate()?;
        self.weights().validate()?;
        self.augment().validate()?;
        self.provider_spec().validate()?;
        if self.steps < 1 {
            return Err(Error::config("steps", "must be >= 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", format!("must be > 0, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum", format!("must lie in [0, 1), got {}", self.momentum)));
        }
        if self.batch_size < self.min_batch() {
            return Err(Error::config(
                "batch_size",
                format!("lambda_contrastive > 0 needs batch_size >= 2, got {}", self.batch_size),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        if self.contrastive_same_image_views && self.provider == ProviderKind::PrecomputedFile {
            return Err(Error::config(
                "contrastive_same_image_views",
                "precomputed features cannot be extracted for transformed views",
            ));
        }
        Ok(())
    }
}

/// Draws, for every valid anchor `(n, k)`, a target image uniformly among
/// the other images whose part `k` is valid. Anchors without candidates are
/// skipped.
pub fn sample_targets<R: Rng + ?Sized>(images: usize, parts: usize, validity: &[bool], rng: &mut R) -> Result<TargetAssignment> {
    if images < 2 {
        return Err(Error::BatchTooSmall(images));
    }
    if validity.len() != images * parts {
        return Err(Error::Shape(format!("validity has {} entries, expected {}", validity.len(), images * parts)));
    }
    let mut targets = Vec::with_capacity(images * parts);
    for n in 0..images {
        for k in 0..parts {
            if !validity[n * parts + k] {
                targets.push(None);
                continue;
            }
            let candidates: Vec<usize> = (0..images).filter(|&i| i != n && validity[i * parts + k]).collect();
            targets.push(if candidates.is_empty() { None } else { Some(candidates[rng.random_range(0..candidates.len())]) });
        }
    }
    Ok(TargetAssignment { images, parts, targets })
}

/// One training image with everything that does not change across steps.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub id: String,
    pub image: Image,
    /// Colour at mask resolution; the network's input.
    pub input: Tensor3,
    /// Foreground at mask resolution.
    pub fg: ForegroundMask,
    pub features: FeatureMap,
}

/// The transformed copy of one batch item.
#[derive(Debug, Clone)]
pub struct PreparedView {
    pub transform: TransformSpec,
    pub image: Image,
    pub fg: ForegroundMask,
    pub features: Option<FeatureMap>,
}

/// Batch composition and augmentations for one step.
#[derive(Debug, Clone)]
pub struct StepPlan {
    pub indices: Vec<usize>,
    pub transforms: Vec<Option<TransformSpec>>,
    target_seed: u64,
}

#[derive(Debug, Clone)]
pub struct StepResult {
    pub breakdown: LossBreakdown,
    pub grads: Vec<ConvGrad>,
    pub skipped_anchors: usize,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub segmenter: Segmenter,
    pub optimizer: Optimizer,
    /// Updates applied so far.
    pub step: u64,
    provider: Provider,
    data: Vec<Prepared>,
}

impl std::fmt::Debug for Trainer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Trainer").field("step", &self.step).field("images", &self.data.len()).finish_non_exhaustive()
    }
}

impl Trainer {
    pub fn new(config: TrainConfig, samples: &[Sample]) -> Result<Self> {
        config.validate()?;
        let provider = Provider::new(config.provider_spec())?;
        Self::with_provider(config, samples, provider)
    }

    pub fn with_provider(config: TrainConfig, samples: &[Sample], provider: Provider) -> Result<Self> {
        config.validate()?;
        let segmenter = Segmenter::new(config.segmenter_spec(), config.seed)?;
        let mut optimizer = Optimizer::new(config.optimizer, config.learning_rate);
        optimizer.momentum = config.momentum;
        let kept: Vec<&Sample> = samples
            .iter()
            .filter(|s| {
                let empty = s.fg.count() == 0;
                if empty {
                    log::warn!("sample {} has an empty foreground; dropped from training", s.id);
                }
                !empty
            })
            .collect();
        if kept.len() < config.min_batch() {
            return Err(Error::InvalidValue(format!(
                "{} usable training images, need at least {}",
                kept.len(),
                config.min_batch()
            )));
        }
        let data = kept
            .par_iter()
            .map(|s| {
                let features = provider.extract(&s.image, Some(&s.id))?;
                let input = segmenter.network_input(&s.image);
                let fg = resample_foreground(&s.fg, input.height(), input.width());
                Ok(Prepared { id: s.id.clone(), image: s.image.clone(), input, fg, features })
            })
            .collect::<Result<Vec<_>>>()?;
        for p in &data {
            if p.fg.count() == 0 {
                log::warn!("sample {} has no foreground at mask resolution", p.id);
            }
        }
        Ok(Self { config, segmenter, optimizer, step: 0, provider, data })
    }

    pub fn data(&self) -> &[Prepared] {
        &self.data
    }

    fn step_rng(&self, step: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(step + 1);
        rng
    }

    /// Batch and augmentations for `step`; a pure function of the seed and
    /// the step number.
    pub fn plan(&self, step: u64) -> Result<StepPlan> {
        let mut rng = self.step_rng(step);
        let n = self.config.batch_size.min(self.data.len());
        let mut indices = index::sample(&mut rng, self.data.len(), n).into_vec();
        indices.sort_unstable();
        let aug = self.config.augment();
        let mut transforms = Vec::with_capacity(n);
        for &i in &indices {
            if !self.config.needs_view() {
                transforms.push(None);
                continue;
            }
            let fg = &self.data[i].fg;
            let mut chosen = None;
            for _ in 0..TRANSFORM_RETRIES {
                let t = sample_transform(&aug, &mut rng)?;
                if warp_foreground(&t, fg).count() > 0 {
                    chosen = Some(t);
                    break;
                }
            }
            if chosen.is_none() {
                log::warn!("no transform keeps the foreground of {} in view; using the identity", self.data[i].id);
            }
            transforms.push(Some(chosen.unwrap_or_else(TransformSpec::identity)));
        }
        Ok(StepPlan { indices, transforms, target_seed: rng.random() })
    }

    pub fn prepare_view(&self, index: usize, t: &TransformSpec) -> Result<PreparedView> {
        let p = &self.data[index];
        let image = apply_to_image(t, &p.image);
        let features = if self.config.contrastive_same_image_views && self.config.lambda_contrastive > 0.0 {
            Some(self.provider.extract(&image, None)?)
        } else {
            None
        };
        Ok(PreparedView { transform: t.clone(), image, fg: warp_foreground(t, &p.fg), features })
    }

    /// Loss and parameter gradients of the current segmenter on `plan`.
    pub fn loss_and_grads(&self, plan: &StepPlan) -> Result<StepResult> {
        let net = &self.segmenter.net;
        let views: Vec<Option<PreparedView>> = plan
            .indices
            .par_iter()
            .zip(&plan.transforms)
            .map(|(&i, t)| t.as_ref().map(|t| self.prepare_view(i, t)).transpose())
            .collect::<Result<_>>()?;
        let caches: Vec<_> = plan.indices.par_iter().map(|&i| net.forward(&self.data[i].input)).collect();
        let view_caches: Vec<_> =
            views.par_iter().map(|v| v.as_ref().map(|v| self.segmenter.forward_cached(&v.image))).collect();

        let items: Vec<ObjectiveItem<'_>> = plan
            .indices
            .iter()
            .enumerate()
            .map(|(b, &i)| {
                let p = &self.data[i];
                ObjectiveItem {
                    image: &p.input,
                    fg: &p.fg,
                    features: &p.features,
                    mask: &caches[b].mask,
                    view: views[b].as_ref().map(|v| TransformedView {
                        transform: &v.transform,
                        mask: &view_caches[b].as_ref().expect("view forward").mask,
                        fg: &v.fg,
                        features: v.features.as_ref(),
                    }),
                }
            })
            .collect();
        let config = self.config.objective();
        let parts = self.config.parts;
        let target_seed = plan.target_seed;
        let out = evaluate(&items, &config, |batch: &BatchDescriptors| {
            let mut rng = ChaCha8Rng::seed_from_u64(target_seed);
            sample_targets(batch.images(), parts, batch.validity(), &mut rng)
                .unwrap_or_else(|_| TargetAssignment { images: batch.images(), parts, targets: vec![None; batch.images() * parts] })
        })?;

        let per_item: Vec<Vec<ConvGrad>> = (0..items.len())
            .into_par_iter()
            .map(|b| {
                let mut g = net.zero_grads();
                net.backward_mask(&caches[b], &out.grads[b].mask, &mut g);
                if let (Some(cache), Some(gm)) = (&view_caches[b], &out.grads[b].view_mask) {
                    net.backward_mask(cache, gm, &mut g);
                }
                g
            })
            .collect();
        let mut grads = net.zero_grads();
        for g in &per_item {
            for (acc, x) in grads.iter_mut().zip(g) {
                acc.add_assign(x);
            }
        }
        Ok(StepResult { breakdown: out.breakdown, grads, skipped_anchors: out.skipped_anchors })
    }

    /// Objective of the current parameters on the batch of `step`.
    pub fn batch_loss(&self, step: u64) -> Result<LossBreakdown> {
        Ok(self.loss_and_grads(&self.plan(step)?)?.breakdown)
    }

    /// One optimizer update; returns the loss before the update.
    pub fn train_step(&mut self) -> Result<LossBreakdown> {
        let plan = self.plan(self.step)?;
        let result = self.loss_and_grads(&plan)?;
        if let Some(term) = result.breakdown.first_non_finite() {
            return Err(Error::NonFinite { step: self.step as usize, term });
        }
        if result.grads.iter().any(|g| g.weight.iter().chain(&g.bias).any(|v| !v.is_finite())) {
            return Err(Error::NonFinite { step: self.step as usize, term: "gradient" });
        }
        if result.skipped_anchors > 0 {
            log::debug!("step {}: {} contrastive anchors skipped", self.step, result.skipped_anchors);
        }
        let mut params: Vec<&mut [f64]> = Vec::new();
        for layer in self.segmenter.net.layers_mut() {
            params.push(&mut layer.weight);
            params.push(&mut layer.bias);
        }
        let grads: Vec<&[f64]> = result.grads.iter().flat_map(|g| [&g.weight[..], &g.bias[..]]).collect();
        self.optimizer.step(params, &grads);
        self.step += 1;
        Ok(result.breakdown)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.segmenter.save_checkpoint(&dir.join(CHECKPOINT_FILE), self.step)?;
        let mut state = self.optimizer.to_param_file();
        state.step = self.step;
        state.save(&dir.join(OPTIMIZER_FILE))
    }

    /// Restores segmenter and optimizer state written by [`Trainer::save`].
    pub fn resume(&mut self, dir: &Path) -> Result<()> {
        let (segmenter, step) = Segmenter::load_matching(&dir.join(CHECKPOINT_FILE), &self.config.segmenter_spec())?;
        let state = ParamFile::load(&dir.join(OPTIMIZER_FILE), OPTIMIZER_MAGIC)?;
        if state.step != step {
            return Err(Error::format(
                dir.join(OPTIMIZER_FILE),
                format!("optimizer state is at step {}, checkpoint at step {step}", state.step),
            ));
        }
        self.optimizer.restore(&state)?;
        self.segmenter = segmenter;
        self.step = step;
        Ok(())
    }
}

pub fn format_loss_row(step: u64, b: &LossBreakdown) -> String {
    format!("{step},{},{},{},{},{}", b.total, b.feature, b.contrastive, b.visual, b.equivariance)
}

/// Summary of a finished [`train`] call.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub loss_log: PathBuf,
    pub steps: u64,
    pub last: Option<LossBreakdown>,
}

/// Runs the loop to `config.steps`, writing the loss log, periodic
/// checkpoints and the final checkpoint into `out`. With `resume`, training
/// continues from the checkpoint already in `out`.
pub fn train(config: TrainConfig, samples: &[Sample], out: &Path, resume: bool) -> Result<(Trainer, TrainOutcome)> {
    let trainer = Trainer::new(config, samples)?;
    run(trainer, out, resume)
}

/// As [`train`], with an already constructed trainer.
pub fn run(mut trainer: Trainer, out: &Path, resume: bool) -> Result<(Trainer, TrainOutcome)> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let log_path = out.join(LOSS_LOG_FILE);
    let mut rows = vec![LOSS_LOG_HEADER.to_string()];
    if resume {
        trainer.resume(out)?;
        let text = fs::read_to_string(&log_path).map_err(|e| Error::io(&log_path, e))?;
        rows.extend(text.lines().skip(1).filter(|l| l.split(',').next().and_then(|s| s.parse::<u64>().ok()).is_some_and(|s| s < trainer.step)).map(str::to_string));
        log::info!("resuming at step {}", trainer.step);
    }
    let mut log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    writeln!(log, "{}", rows.join("\n")).map_err(|e| Error::io(&log_path, e))?;

    let total = trainer.config.steps;
    let every = trainer.config.checkpoint_every;
    let mut last = None;
    while trainer.step < total {
        let step = trainer.step;
        let b = trainer.train_step()?;
        writeln!(log, "{}", format_loss_row(step, &b)).map_err(|e| Error::io(&log_path, e))?;
        if step.is_multiple_of(100) || step + 1 == total {
            log::info!(
                "step {step}: total {:.4} (f {:.4}, c {:.4}, v {:.4}, e {:.4})",
                b.total,
                b.feature,
                b.contrastive,
                b.visual,
                b.equivariance
            );
        }
        last = Some(b);
        if every > 0 && trainer.step.is_multiple_of(every) && trainer.step < total {
            trainer.save(out)?;
        }
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    trainer.save(out)?;
    let outcome = TrainOutcome { checkpoint: out.join(CHECKPOINT_FILE), loss_log: log_path, steps: trainer.step, last };
    Ok((trainer, outcome))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::synthetic::{generate_samples, SyntheticSpec};
    use crate::datasets::Split;
    use crate::types::SoftMask;

    fn small_samples(n: usize, side: usize) -> Vec<Sample> {
        let spec = SyntheticSpec { width: side, height: side, train: n, test: 0, ..SyntheticSpec::default() };
        generate_samples(&spec).unwrap().into_iter().filter(|s| s.split == Split::Train).map(|s| s.sample).collect()
    }

    fn quick_config() -> TrainConfig {
        TrainConfig { batch_size: 3, steps: 3, resolution: 0.5, provider_layers: vec!["block3".into()], ..TrainConfig::default() }
    }

    #[test]
    fn config_rejects_bad_values_with_key_names() {
        let err = TrainConfig::from_toml("batch_size = 1\n").unwrap_err();
        assert!(err.to_string().contains("batch_size"), "{err}");
        assert!(TrainConfig::from_toml("batch_size = 1\nlambda_contrastive = 0.0\n").is_ok());
        let err = TrainConfig::from_toml("steps = 0\n").unwrap_err();
        assert!(err.to_string().contains("steps"), "{err}");
        let err = TrainConfig::from_toml("learning_rate = 0.0\n").unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
        let err = TrainConfig::from_toml("lambda_featur = 1.0\n").unwrap_err();
        assert!(err.to_string().contains("lambda_featur"), "{err}");
        let c = TrainConfig::from_toml("K = 3\noptimizer = \"sgd-momentum\"\nprovider = \"raw-color\"\n").unwrap();
        assert_eq!((c.parts, c.optimizer, c.provider), (3, OptimizerKind::SgdMomentum, ProviderKind::RawColor));
        assert_eq!(TrainConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn two_images_target_each_other() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = sample_targets(2, 3, &[true; 6], &mut rng).unwrap();
        assert_eq!(t.targets, vec![Some(1), Some(1), Some(1), Some(0), Some(0), Some(0)]);
        assert!(matches!(sample_targets(1, 3, &[true; 3], &mut rng), Err(Error::BatchTooSmall(1))));
    }

    #[test]
    fn targets_are_uniform_over_other_images() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let draws = 10_000;
        let mut counts = [0usize; 5];
        for _ in 0..draws {
            let t = sample_targets(5, 1, &[true; 5], &mut rng).unwrap();
            counts[t.get(2, 0).unwrap()] += 1;
        }
        assert_eq!(counts[2], 0);
        let (p, n) = (0.25, draws as f64);
        let sigma = (n * p * (1.0 - p)).sqrt();
        for (i, &c) in counts.iter().enumerate().filter(|&(i, _)| i != 2) {
            assert!((c as f64 - n * p).abs() < 3.0 * sigma, "candidate {i}: {c}");
        }
    }

    #[test]
    fn anchors_without_candidates_are_skipped() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        // Part 1 is valid only in image 0.
        let validity = [true, true, true, false, true, false];
        let t = sample_targets(3, 2, &validity, &mut rng).unwrap();
        assert_eq!((t.get(0, 1), t.get(1, 1), t.get(2, 1)), (None, None, None));
        assert!(t.get(0, 0).is_some());
    }

    #[test]
    fn identity_only_equivariance_leaves_parameters_unchanged() {
        let samples = small_samples(4, 16);
        let config = TrainConfig {
            lambda_feature: 0.0,
            lambda_contrastive: 0.0,
            lambda_visual: 0.0,
            resolution: 1.0,
            provider: ProviderKind::RawColor,
            ..quick_config()
        };
        let aug = AugmentConfig::identity();
        let identity = TrainConfig {
            max_rotation_deg: aug.max_rotation_deg,
            min_scale: aug.min_scale,
            max_scale: aug.max_scale,
            max_translation: aug.max_translation,
            brightness: aug.brightness,
            contrast: aug.contrast,
            saturation: aug.saturation,
            ..config
        };
        let mut trainer = Trainer::new(identity, &samples).unwrap();
        // A non-zero head so the mask is not uniform.
        trainer.segmenter.net.head.weight.iter_mut().enumerate().for_each(|(i, w)| *w = ((i % 7) as f64 - 3.0) * 0.1);
        let before = trainer.segmenter.clone();
        let b = trainer.train_step().unwrap();
        assert_eq!(b.equivariance, 0.0);
        assert_eq!(trainer.segmenter, before);
    }

    #[test]
    fn same_seed_same_trajectory() {
        let samples = small_samples(6, 16);
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        train(quick_config(), &samples, dir_a.path(), false).unwrap();
        train(quick_config(), &samples, dir_b.path(), false).unwrap();
        for f in [LOSS_LOG_FILE, CHECKPOINT_FILE, OPTIMIZER_FILE] {
            assert_eq!(fs::read(dir_a.path().join(f)).unwrap(), fs::read(dir_b.path().join(f)).unwrap(), "{f}");
        }
        let log = fs::read_to_string(dir_a.path().join(LOSS_LOG_FILE)).unwrap();
        assert_eq!(log.lines().next(), Some(LOSS_LOG_HEADER));
        assert_eq!(log.lines().count(), 4);
    }

    #[test]
    fn resumed_run_matches_uninterrupted_run() {
        let samples = small_samples(6, 16);
        let full = tempfile::tempdir().unwrap();
        let split = tempfile::tempdir().unwrap();
        train(TrainConfig { steps: 4, ..quick_config() }, &samples, full.path(), false).unwrap();
        train(TrainConfig { steps: 2, ..quick_config() }, &samples, split.path(), false).unwrap();
        let (trainer, outcome) = train(TrainConfig { steps: 4, ..quick_config() }, &samples, split.path(), true).unwrap();
        assert_eq!((trainer.step, outcome.steps), (4, 4));
        for f in [LOSS_LOG_FILE, CHECKPOINT_FILE] {
            assert_eq!(fs::read(full.path().join(f)).unwrap(), fs::read(split.path().join(f)).unwrap(), "{f}");
        }
    }

    #[test]
    fn single_step_descends() {
        let samples = small_samples(8, 16);
        let mut decreased = 0;
        for seed in 0..10 {
            let config = TrainConfig { seed, batch_size: 4, learning_rate: 1e-3, ..quick_config() };
            let mut trainer = Trainer::new(config, &samples).unwrap();
            let before = trainer.train_step().unwrap();
            let plan = trainer.plan(0).unwrap();
            let after = trainer.loss_and_grads(&plan).unwrap().breakdown;
            decreased += usize::from(after.total < before.total);
        }
        assert!(decreased >= 9, "{decreased}/10 steps decreased the loss");
    }

    #[test]
    fn colour_function_model_is_equivariant_in_the_pipeline() {
        // Colours sum to one, so a mask equal to the colour is linear in it.
        let side = 24;
        let image = Image::new(Tensor3::from_fn(3, side, side, |c, y, x| {
            let a = 0.2 + 0.3 * x as f64 / side as f64;
            let b = 0.1 + 0.25 * y as f64 / side as f64;
            [a, b, 1.0 - a - b][c]
        }))
        .unwrap();
        let fg = ForegroundMask::from_fn(side, side, |y, x| (4..20).contains(&y) && (3..21).contains(&x));
        let sample = Sample { id: "a".into(), class: None, image, fg, keypoints: None, parts: None };
        let config = TrainConfig {
            parts: 3,
            batch_size: 1,
            lambda_feature: 0.0,
            lambda_contrastive: 0.0,
            lambda_visual: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            provider: ProviderKind::RawColor,
            ..TrainConfig::default()
        };
        let trainer = Trainer::new(config.clone(), std::slice::from_ref(&sample)).unwrap();
        let plan = trainer.plan(0).unwrap();
        let t = plan.transforms[0].clone().unwrap();
        assert!(!t.is_geometric_identity());
        let view = trainer.prepare_view(0, &t).unwrap();
        let p = &trainer.data()[0];
        // Pixels warped in from outside the image are black; give them a uniform mask.
        let oracle = |input: &Tensor3| {
            let p = input.plane();
            let mut t = input.clone();
            for u in 0..p {
                if (0..3).map(|c| input.data()[c * p + u]).sum::<f64>() == 0.0 {
                    (0..3).for_each(|c| t.data_mut()[c * p + u] = 1.0 / 3.0);
                }
            }
            SoftMask::new(t).unwrap()
        };
        let mask = oracle(&p.input);
        let view_mask = oracle(&trainer.segmenter.network_input(&view.image));
        let item = ObjectiveItem {
            image: &p.input,
            fg: &p.fg,
            features: &p.features,
            mask: &mask,
            view: Some(TransformedView { transform: &t, mask: &view_mask, fg: &view.fg, features: None }),
        };
        let out = evaluate(&[item], &config.objective(), |_| unreachable!()).unwrap();
        assert!(out.breakdown.equivariance < 1e-12, "{}", out.breakdown.equivariance);
    }
}
