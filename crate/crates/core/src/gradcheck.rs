//! Central finite-difference checks of the analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::losses::contrastive::TargetAssignment;
use crate::losses::objective::{evaluate, DescriptorObjective, LossWeights, ObjectiveConfig, ObjectiveItem, TransformedView};
use crate::nn::{softmax_backward, ConvGrad};
use crate::segmenter::{Segmenter, SegmenterSpec};
use crate::transforms::{apply_to_image, warp_foreground, TransformSpec};
use crate::types::{FeatureMap, ForegroundMask, Image, SoftMask, Tensor3};

pub const FD_STEP: f64 = 1e-4;
pub const MAX_REL_ERROR: f64 = 1e-4;
/// Entries where both gradients are below this are compared absolutely.
pub const ABS_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub entries: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < MAX_REL_ERROR
    }
}

pub fn central_differences(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + step;
            let plus = f(&probe);
            probe[i] = x[i] - step;
            let minus = f(&probe);
            probe[i] = x[i];
            (plus - minus) / (2.0 * step)
        })
        .collect()
}

pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(ABS_FLOOR))
        .fold(0.0, f64::max)
}

/// Which objective configuration an instance is checked under.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Term {
    Feature,
    Contrastive,
    ContrastiveL2,
    ContrastiveViews,
    Visual,
    Equivariance,
    Total,
}

impl Term {
    pub const ALL: [Term; 7] = [
        Term::Feature,
        Term::Contrastive,
        Term::ContrastiveL2,
        Term::ContrastiveViews,
        Term::Visual,
        Term::Equivariance,
        Term::Total,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Term::Feature => "feature",
            Term::Contrastive => "contrastive",
            Term::ContrastiveL2 => "contrastive-l2",
            Term::ContrastiveViews => "contrastive-views",
            Term::Visual => "visual",
            Term::Equivariance => "equivariance",
            Term::Total => "total",
        }
    }

    fn config(self) -> ObjectiveConfig {
        let zero = LossWeights { feature: 0.0, contrastive: 0.0, visual: 0.0, equivariance: 0.0, temperature: 0.5 };
        let mut c = ObjectiveConfig::default();
        c.weights = match self {
            Term::Feature => LossWeights { feature: 1.0, ..zero },
            Term::Contrastive | Term::ContrastiveL2 | Term::ContrastiveViews => LossWeights { contrastive: 1.0, ..zero },
            Term::Visual => LossWeights { visual: 1.0, ..zero },
            Term::Equivariance => LossWeights { equivariance: 1.0, ..zero },
            Term::Total => LossWeights { feature: 0.7, contrastive: 1.3, visual: 2.0, equivariance: 0.4, temperature: 0.5 },
        };
        c.descriptor_objective = if self == Term::ContrastiveL2 { DescriptorObjective::L2 } else { DescriptorObjective::Contrastive };
        c.same_image_views = self == Term::ContrastiveViews;
        c
    }
}

/// A random batch with every input of the objective exposed as a flat
/// parameter vector: `[logits | view logits | features | view features]`.
#[derive(Debug, Clone)]
pub struct ObjectiveInstance {
    pub parts: usize,
    pub height: usize,
    pub width: usize,
    pub feature_dim: usize,
    pub feature_grid: (usize, usize),
    pub images: Vec<Tensor3>,
    pub fgs: Vec<ForegroundMask>,
    pub transforms: Vec<TransformSpec>,
    pub view_fgs: Vec<ForegroundMask>,
    pub params: Vec<f64>,
}

impl ObjectiveInstance {
    pub fn random(images: usize, parts: usize, side: usize, feature_grid: (usize, usize), seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let feature_dim = 4;
        let imgs: Vec<Tensor3> =
            (0..images).map(|_| Tensor3::from_fn(3, side, side, |_, _, _| rng.random_range(0.0..1.0))).collect();
        let fgs: Vec<ForegroundMask> = (0..images)
            .map(|n| ForegroundMask::from_fn(side, side, |y, x| !(y == n && x < side / 2) && (y + x) % 7 != 3))
            .collect();
        let transforms: Vec<TransformSpec> = (0..images)
            .map(|n| {
                let sign = if n % 2 == 0 { 1.0 } else { -1.0 };
                TransformSpec::geometric(sign * 13.0, 1.08, [0.04 * sign, -0.03]).expect("valid transform")
            })
            .collect();
        let view_fgs = fgs.iter().zip(&transforms).map(|(f, t)| warp_foreground(t, f)).collect();
        let (fh, fw) = feature_grid;
        let len = 2 * images * parts * side * side + 2 * images * feature_dim * fh * fw;
        let mut params = Vec::with_capacity(len);
        for _ in 0..2 * images * parts * side * side {
            params.push(rng.random_range(-1.5..1.5));
        }
        for _ in 0..2 * images * feature_dim * fh * fw {
            params.push(rng.random_range(-1.0..1.0));
        }
        Self {
            parts,
            height: side,
            width: side,
            feature_dim,
            feature_grid,
            images: imgs,
            fgs,
            transforms,
            view_fgs,
            params,
        }
    }

    fn logit_len(&self) -> usize {
        self.parts * self.height * self.width
    }

    fn feature_len(&self) -> usize {
        self.feature_dim * self.feature_grid.0 * self.feature_grid.1
    }

    /// Number of leading parameters that are mask logits.
    pub fn logit_params(&self) -> usize {
        2 * self.images.len() * self.logit_len()
    }

    fn unpack(&self, params: &[f64]) -> (Vec<Tensor3>, Vec<Tensor3>, Vec<FeatureMap>, Vec<FeatureMap>) {
        let n = self.images.len();
        let (ll, fl) = (self.logit_len(), self.feature_len());
        let (fh, fw) = self.feature_grid;
        let logits = |i: usize| {
            Tensor3::from_vec(self.parts, self.height, self.width, params[i * ll..(i + 1) * ll].to_vec()).expect("shape")
        };
        let off = 2 * n * ll;
        let feats = |i: usize| {
            let t = Tensor3::from_vec(self.feature_dim, fh, fw, params[off + i * fl..off + (i + 1) * fl].to_vec()).expect("shape");
            FeatureMap::new(t).expect("finite")
        };
        (
            (0..n).map(logits).collect(),
            (n..2 * n).map(logits).collect(),
            (0..n).map(feats).collect(),
            (n..2 * n).map(feats).collect(),
        )
    }

    fn targets(&self) -> TargetAssignment {
        let n = self.images.len();
        let targets = (0..n).flat_map(|i| std::iter::repeat_n(Some((i + 1) % n), self.parts)).collect();
        TargetAssignment { images: n, parts: self.parts, targets }
    }

    /// Objective value and its gradient with respect to `params`.
    pub fn value_and_grad(&self, params: &[f64], config: &ObjectiveConfig) -> Result<(f64, Vec<f64>)> {
        let (logits, view_logits, feats, view_feats) = self.unpack(params);
        let masks: Vec<SoftMask> = logits.iter().map(SoftMask::from_logits).collect();
        let view_masks: Vec<SoftMask> = view_logits.iter().map(SoftMask::from_logits).collect();
        let items: Vec<ObjectiveItem> = (0..self.images.len())
            .map(|i| ObjectiveItem {
                image: &self.images[i],
                fg: &self.fgs[i],
                features: &feats[i],
                mask: &masks[i],
                view: Some(TransformedView {
                    transform: &self.transforms[i],
                    mask: &view_masks[i],
                    fg: &self.view_fgs[i],
                    features: Some(&view_feats[i]),
                }),
            })
            .collect();
        let out = evaluate(&items, config, |_| self.targets())?;
        let n = self.images.len();
        let mut grad = vec![0.0; params.len()];
        let (ll, fl) = (self.logit_len(), self.feature_len());
        let off = 2 * n * ll;
        for (i, g) in out.grads.iter().enumerate() {
            let gl = softmax_backward(masks[i].tensor(), &g.mask);
            grad[i * ll..(i + 1) * ll].copy_from_slice(gl.data());
            if let Some(vm) = &g.view_mask {
                let gl = softmax_backward(view_masks[i].tensor(), vm);
                grad[(n + i) * ll..(n + i + 1) * ll].copy_from_slice(gl.data());
            }
            grad[off + i * fl..off + (i + 1) * fl].copy_from_slice(g.features.data());
            if let Some(vf) = &g.view_features {
                grad[off + (n + i) * fl..off + (n + i + 1) * fl].copy_from_slice(vf.data());
            }
        }
        Ok((out.breakdown.total, grad))
    }

    /// Checks one term, reporting logits and features separately.
    pub fn check(&self, term: Term) -> Result<[CheckResult; 2]> {
        let config = term.config();
        let (_, analytic) = self.value_and_grad(&self.params, &config)?;
        let numeric = central_differences(
            |p| self.value_and_grad(p, &config).map(|(v, _)| v).unwrap_or(f64::NAN),
            &self.params,
            FD_STEP,
        );
        let split = self.logit_params();
        let tag = format!("{} K={} N={}", term.name(), self.parts, self.images.len());
        Ok([
            CheckResult {
                name: format!("{tag} wrt logits"),
                max_rel_error: max_relative_error(&analytic[..split], &numeric[..split]),
                entries: split,
            },
            CheckResult {
                name: format!("{tag} wrt features"),
                max_rel_error: max_relative_error(&analytic[split..], &numeric[split..]),
                entries: analytic.len() - split,
            },
        ])
    }
}

/// Every loss term and the total on `N = 2`, `K ∈ {2, 3}`, 6×6 instances,
/// with features both on a coarser grid and at mask resolution.
pub fn loss_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut results = Vec::new();
    for (i, parts) in [2usize, 3].into_iter().enumerate() {
        for (j, grid) in [(3usize, 3usize), (6, 6)].into_iter().enumerate() {
            let inst = ObjectiveInstance::random(2, parts, 6, grid, seed + (2 * i + j) as u64);
            for term in Term::ALL {
                let [a, b] = inst.check(term)?;
                results.push(CheckResult { name: format!("{} grid={}x{}", a.name, grid.0, grid.1), ..a });
                results.push(CheckResult { name: format!("{} grid={}x{}", b.name, grid.0, grid.1), ..b });
            }
        }
    }
    Ok(results)
}

/// Gradient of the total objective with respect to segmenter parameters on
/// `N = 2` random 8×8 images, checked on a deterministic subset of entries
/// (`per_layer` weights and up to two biases of every layer).
pub fn segmenter_check(parts: usize, per_layer: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = 8;
    let mut seg = Segmenter::new(SegmenterSpec::new(parts), seed)?;
    for w in seg.net.head.weight.iter_mut().chain(seg.net.head.bias.iter_mut()) {
        *w = rng.random_range(-1.0..1.0);
    }
    let images: Vec<Image> = (0..2)
        .map(|_| Image::new(Tensor3::from_fn(3, side, side, |_, _, _| rng.random_range(0.0..1.0))))
        .collect::<Result<_>>()?;
    let fgs: Vec<ForegroundMask> =
        (0..2).map(|n| ForegroundMask::from_fn(side, side, |y, x| (y + x + n) % 5 != 0 && y > n)).collect();
    let transforms: Vec<TransformSpec> = (0..2)
        .map(|n| TransformSpec::geometric(if n == 0 { 11.0 } else { -9.0 }, 1.05, [0.03, -0.02]))
        .collect::<Result<_>>()?;
    let views: Vec<Image> = images.iter().zip(&transforms).map(|(im, t)| apply_to_image(t, im)).collect();
    let view_fgs: Vec<ForegroundMask> = fgs.iter().zip(&transforms).map(|(f, t)| warp_foreground(t, f)).collect();
    let features: Vec<FeatureMap> = (0..2)
        .map(|_| FeatureMap::new(Tensor3::from_fn(4, 4, 4, |_, _, _| rng.random_range(-1.0..1.0))))
        .collect::<Result<_>>()?;
    let config = Term::Total.config();
    let targets = TargetAssignment::pair(parts);

    // (layer, is_bias, index) of every checked entry.
    let mut picks = Vec::new();
    for (l, layer) in seg.net.layers().iter().enumerate() {
        for i in rand::seq::index::sample(&mut rng, layer.weight.len(), per_layer.min(layer.weight.len())) {
            picks.push((l, false, i));
        }
        for b in 0..layer.bias.len().min(2) {
            picks.push((l, true, b));
        }
    }

    let objective = |seg: &Segmenter, with_grad: bool| -> Result<(f64, Vec<ConvGrad>)> {
        let caches: Vec<_> = images.iter().map(|im| seg.forward_cached(im)).collect();
        let view_caches: Vec<_> = views.iter().map(|im| seg.forward_cached(im)).collect();
        let items: Vec<ObjectiveItem> = (0..2)
            .map(|i| ObjectiveItem {
                image: images[i].tensor(),
                fg: &fgs[i],
                features: &features[i],
                mask: &caches[i].mask,
                view: Some(TransformedView {
                    transform: &transforms[i],
                    mask: &view_caches[i].mask,
                    fg: &view_fgs[i],
                    features: None,
                }),
            })
            .collect();
        let out = evaluate(&items, &config, |_| targets.clone())?;
        let mut grads = seg.net.zero_grads();
        if with_grad {
            for i in 0..2 {
                seg.net.backward_mask(&caches[i], &out.grads[i].mask, &mut grads);
                seg.net.backward_mask(&view_caches[i], out.grads[i].view_mask.as_ref().expect("view"), &mut grads);
            }
        }
        Ok((out.breakdown.total, grads))
    };

    let (_, grads) = objective(&seg, true)?;
    let analytic: Vec<f64> =
        picks.iter().map(|&(l, bias, i)| if bias { grads[l].bias[i] } else { grads[l].weight[i] }).collect();
    let x0: Vec<f64> = picks
        .iter()
        .map(|&(l, bias, i)| {
            let layer = seg.net.layers()[l];
            if bias { layer.bias[i] } else { layer.weight[i] }
        })
        .collect();
    let mut probe = seg.clone();
    let numeric = central_differences(
        |x| {
            for (&(l, bias, i), &v) in picks.iter().zip(x) {
                let layer = &mut probe.net.layers_mut()[l];
                if bias {
                    layer.bias[i] = v;
                } else {
                    layer.weight[i] = v;
                }
            }
            objective(&probe, false).map(|(v, _)| v).unwrap_or(f64::NAN)
        },
        &x0,
        FD_STEP,
    );
    Ok(CheckResult {
        name: format!("total K={parts} N=2 wrt segmenter parameters"),
        max_rel_error: max_relative_error(&analytic, &numeric),
        entries: picks.len(),
    })
}

/// [`loss_suite`] plus the segmenter-parameter checks.
pub fn full_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut results = loss_suite(seed)?;
    for parts in [2, 3] {
        results.push(segmenter_check(parts, 6, seed + parts as u64)?);
    }
    Ok(results)
}
