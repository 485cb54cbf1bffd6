//! The weighted training objective over a batch.
//!
//! Every term is summed over pixels inside the image and averaged over the
//! batch. A term whose weight is zero is not evaluated at all.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::consistency::{visual_loss_with_grad, feature_loss_with_grad, ImageDescriptors};
use crate::losses::contrastive::{
    contrastive_loss, l2_descriptor_loss, BatchDescriptors, ContrastiveOptions, DescriptorLossOutput, TargetAssignment,
};
use crate::losses::equivariance::equivariance_loss;
use crate::transforms::TransformSpec;
use crate::types::{FeatureMap, ForegroundMask, SoftMask, Tensor3};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub feature: f64,
    pub contrastive: f64,
    pub visual: f64,
    pub equivariance: f64,
    pub temperature: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { feature: 1.0, contrastive: 1.0, visual: 1.0, equivariance: 1.0, temperature: 0.1 }
    }
}

impl LossWeights {
    pub fn only_visual() -> Self {
        Self { feature: 0.0, contrastive: 0.0, visual: 1.0, equivariance: 0.0, ..Self::default() }
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            feature: self.feature * c,
            contrastive: self.contrastive * c,
            visual: self.visual * c,
            equivariance: self.equivariance * c,
            temperature: self.temperature,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config("temperature", format!("must be > 0, got {}", self.temperature)));
        }
        for (key, v) in [
            ("lambda_feature", self.feature),
            ("lambda_contrastive", self.contrastive),
            ("lambda_visual", self.visual),
            ("lambda_equivariance", self.equivariance),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(key, format!("must be >= 0, got {v}")));
            }
        }
        if self.feature + self.contrastive + self.visual + self.equivariance <= 0.0 {
            return Err(Error::config("lambda_*", "at least one loss weight must be positive"));
        }
        Ok(())
    }
}

/// What the descriptor-matching term compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DescriptorObjective {
    #[default]
    Contrastive,
    /// Plain squared distance to the target, no negatives.
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveConfig {
    pub weights: LossWeights,
    pub descriptor_objective: DescriptorObjective,
    /// Contrast each image's parts against its own transformed view instead
    /// of against other images.
    pub same_image_views: bool,
    pub same_image_negatives: bool,
    pub normalize_descriptors: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            descriptor_objective: DescriptorObjective::Contrastive,
            same_image_views: false,
            same_image_negatives: false,
            normalize_descriptors: true,
        }
    }
}

impl ObjectiveConfig {
    fn contrastive_options(&self) -> ContrastiveOptions {
        ContrastiveOptions {
            temperature: self.weights.temperature,
            normalize: self.normalize_descriptors,
            same_image_negatives: self.same_image_negatives,
        }
    }

    fn descriptor_loss(&self, batch: &BatchDescriptors, targets: &TargetAssignment) -> Result<DescriptorLossOutput> {
        match self.descriptor_objective {
            DescriptorObjective::Contrastive => contrastive_loss(batch, targets, &self.contrastive_options()),
            DescriptorObjective::L2 => l2_descriptor_loss(batch, targets, self.normalize_descriptors),
        }
    }
}

/// The transformed copy `T(I)` of one batch item.
#[derive(Debug, Clone, Copy)]
pub struct TransformedView<'a> {
    pub transform: &'a TransformSpec,
    /// `f(T(I))`.
    pub mask: &'a SoftMask,
    /// Warped foreground; restricts the equivariance sum.
    pub fg: &'a ForegroundMask,
    /// `φ(T(I))`; only needed for same-image views.
    pub features: Option<&'a FeatureMap>,
}

/// One image with everything the objective reads.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveItem<'a> {
    /// Colour signal at mask resolution.
    pub image: &'a Tensor3,
    pub fg: &'a ForegroundMask,
    pub features: &'a FeatureMap,
    /// `f(I)`.
    pub mask: &'a SoftMask,
    pub view: Option<TransformedView<'a>>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub feature: f64,
    pub contrastive: f64,
    pub visual: f64,
    pub equivariance: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.feature, self.contrastive, self.visual, self.equivariance, self.total].iter().all(|v| v.is_finite())
    }

    pub fn first_non_finite(&self) -> Option<&'static str> {
        [
            ("loss_f", self.feature),
            ("loss_c", self.contrastive),
            ("loss_v", self.visual),
            ("loss_e", self.equivariance),
            ("loss_total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(k, _)| k)
    }
}

/// Gradient of the weighted total with respect to one item's inputs.
#[derive(Debug, Clone)]
pub struct ItemGrads {
    pub mask: Tensor3,
    pub view_mask: Option<Tensor3>,
    pub features: Tensor3,
    pub view_features: Option<Tensor3>,
}

#[derive(Debug, Clone)]
pub struct ObjectiveOutput {
    pub breakdown: LossBreakdown,
    pub grads: Vec<ItemGrads>,
    pub skipped_anchors: usize,
}

fn axpy(dst: &mut Tensor3, a: f64, src: &Tensor3) {
    for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d += a * s;
    }
}

/// Evaluates the weighted objective and its gradients.
///
/// `sample_targets` is called once with the batch's descriptors (so empty
/// parts are visible) when the cross-image descriptor term is active.
pub fn evaluate(
    items: &[ObjectiveItem<'_>],
    config: &ObjectiveConfig,
    sample_targets: impl FnOnce(&BatchDescriptors) -> TargetAssignment,
) -> Result<ObjectiveOutput> {
    let w = config.weights;
    w.validate()?;
    if items.is_empty() {
        return Err(Error::InvalidValue("empty batch".into()));
    }
    let n = items.len() as f64;
    let mut grads: Vec<ItemGrads> = items
        .iter()
        .map(|it| ItemGrads {
            mask: Tensor3::zeros(it.mask.parts(), it.mask.height(), it.mask.width()),
            view_mask: it.view.map(|v| Tensor3::zeros(v.mask.parts(), v.mask.height(), v.mask.width())),
            features: Tensor3::zeros(it.features.dim(), it.features.height(), it.features.width()),
            view_features: it.view.and_then(|v| v.features).map(|f| Tensor3::zeros(f.dim(), f.height(), f.width())),
        })
        .collect();
    let mut b = LossBreakdown::default();
    let mut skipped_anchors = 0;

    for (it, g) in items.iter().zip(grads.iter_mut()) {
        if w.feature > 0.0 {
            let out = feature_loss_with_grad(it.features, it.mask, it.fg)?;
            b.feature += out.value / n;
            axpy(&mut g.mask, w.feature / n, &out.grad_mask);
            axpy(&mut g.features, w.feature / n, &out.grad_signal);
        }
        if w.visual > 0.0 {
            let out = visual_loss_with_grad(it.image, it.mask, it.fg)?;
            b.visual += out.value / n;
            axpy(&mut g.mask, w.visual / n, &out.grad_mask);
        }
        if w.equivariance > 0.0 {
            let view = it.view.ok_or_else(|| Error::InvalidValue("equivariance needs a transformed view".into()))?;
            let out = equivariance_loss(it.mask, view.mask, view.transform, Some(view.fg))?;
            b.equivariance += out.value / n;
            axpy(&mut g.mask, w.equivariance / n, &out.grad_orig);
            axpy(g.view_mask.as_mut().expect("view present"), w.equivariance / n, &out.grad_transformed);
        }
    }

    if w.contrastive > 0.0 {
        let scale = w.contrastive / n;
        if config.same_image_views {
            for (it, g) in items.iter().zip(grads.iter_mut()) {
                let view = it.view.ok_or_else(|| Error::InvalidValue("same-image views need a transformed view".into()))?;
                let vf = view
                    .features
                    .ok_or_else(|| Error::InvalidValue("same-image views need features of the view".into()))?;
                let da = ImageDescriptors::new(it.features, it.mask, it.fg)?;
                let db = ImageDescriptors::new(vf, view.mask, view.fg)?;
                let batch = batch_from(&[&da, &db], it.features.dim())?;
                let out = config.descriptor_loss(&batch, &TargetAssignment::pair(batch.parts()))?;
                b.contrastive += out.value / n;
                skipped_anchors += out.skipped;
                let (gm, gf) = da.backward(it.features, &per_part(&out, &batch, 0));
                axpy(&mut g.mask, scale, &gm);
                axpy(&mut g.features, scale, &gf);
                let (gm, gf) = db.backward(vf, &per_part(&out, &batch, 1));
                axpy(g.view_mask.as_mut().expect("view present"), scale, &gm);
                axpy(g.view_features.as_mut().expect("view features present"), scale, &gf);
            }
        } else {
            let descs = items
                .iter()
                .map(|it| ImageDescriptors::new(it.features, it.mask, it.fg))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&ImageDescriptors> = descs.iter().collect();
            let batch = batch_from(&refs, items[0].features.dim())?;
            let targets = sample_targets(&batch);
            let out = config.descriptor_loss(&batch, &targets)?;
            b.contrastive = out.value / n;
            skipped_anchors += out.skipped;
            for (idx, ((it, g), d)) in items.iter().zip(grads.iter_mut()).zip(&descs).enumerate() {
                let (gm, gf) = d.backward(it.features, &per_part(&out, &batch, idx));
                axpy(&mut g.mask, scale, &gm);
                axpy(&mut g.features, scale, &gf);
            }
        }
    }

    b.total = w.feature * b.feature + w.contrastive * b.contrastive + w.visual * b.visual + w.equivariance * b.equivariance;
    Ok(ObjectiveOutput { breakdown: b, grads, skipped_anchors })
}

/// Loss values only.
pub fn total_loss(
    items: &[ObjectiveItem<'_>],
    config: &ObjectiveConfig,
    sample_targets: impl FnOnce(&BatchDescriptors) -> TargetAssignment,
) -> Result<LossBreakdown> {
    Ok(evaluate(items, config, sample_targets)?.breakdown)
}

fn batch_from(descs: &[&ImageDescriptors], dim: usize) -> Result<BatchDescriptors> {
    let rows: Vec<Vec<Option<Vec<f64>>>> =
        descs.iter().map(|d| d.parts.iter().map(|p| p.as_ref().map(|(_, z)| z.clone())).collect()).collect();
    BatchDescriptors::from_parts(dim, &rows)
}

fn per_part(out: &DescriptorLossOutput, batch: &BatchDescriptors, n: usize) -> Vec<Vec<f64>> {
    (0..batch.parts()).map(|k| out.grad_of(batch, n, k).to_vec()).collect()
}
