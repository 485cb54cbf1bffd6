//! Part descriptors and the two within-part consistency losses.
//!
//! Both the feature loss and the visual loss are the same quantity, the
//! mask-weighted within-part scatter `Σ_k Σ_u w_ku ‖z_k − x_u‖²`, evaluated
//! on different signals: perceptual features at the feature grid, or raw
//! colour at full resolution. They share [`weighted_scatter`].

use crate::error::{Error, Result};
use crate::losses::pool::AreaPool;
use crate::types::{FeatureMap, ForegroundMask, Image, PartDescriptor, SoftMask, Tensor3, EPS_MASS};

/// Value and gradients of a weighted scatter.
#[derive(Debug, Clone)]
pub struct ScatterOutput {
    pub value: f64,
    /// `∂L/∂w`, shape of the weights.
    pub grad_weights: Tensor3,
    /// `∂L/∂x`, shape of the signal.
    pub grad_signal: Tensor3,
}

/// Weighted means `z_k` and masses `|w_k|`; `None` for empty parts.
pub fn weighted_means(signal: &Tensor3, weights: &Tensor3) -> Vec<Option<(f64, Vec<f64>)>> {
    let (d, h, w) = signal.shape();
    assert_eq!((weights.height(), weights.width()), (h, w), "weights/signal grid");
    let p = h * w;
    let sig = signal.data();
    (0..weights.channels())
        .map(|k| {
            let wk = weights.channel(k);
            let mass: f64 = wk.iter().sum();
            if mass <= EPS_MASS {
                return None;
            }
            let mut z = vec![0.0; d];
            for (c, zc) in z.iter_mut().enumerate() {
                let plane = &sig[c * p..(c + 1) * p];
                let mut s = 0.0;
                for (wu, xu) in wk.iter().zip(plane) {
                    if *wu != 0.0 {
                        s += wu * xu;
                    }
                }
                *zc = s / mass;
            }
            Some((mass, z))
        })
        .collect()
}

/// `Σ_k Σ_u w_ku ‖z_k − x_u‖²` with `z_k` the `w_k`-weighted mean of `x`.
///
/// Empty parts contribute nothing. Because `z_k` is the minimiser of the
/// inner sum, `∂L/∂w_ku = ‖z_k − x_u‖²` and `∂L/∂x_u = 2 Σ_k w_ku (x_u − z_k)`.
pub fn weighted_scatter(signal: &Tensor3, weights: &Tensor3) -> ScatterOutput {
    let (d, h, w) = signal.shape();
    let p = h * w;
    let sig = signal.data();
    let means = weighted_means(signal, weights);
    let mut value = 0.0;
    let mut grad_weights = Tensor3::zeros(weights.channels(), h, w);
    let mut grad_signal = Tensor3::zeros(d, h, w);
    let gs = grad_signal.data_mut();
    for (k, m) in means.iter().enumerate() {
        let Some((_, z)) = m else { continue };
        let wk = weights.channel(k);
        let gw = grad_weights.channel_mut(k);
        let mut part = 0.0;
        for u in 0..p {
            let wu = wk[u];
            if wu == 0.0 {
                continue;
            }
            let mut dist = 0.0;
            for c in 0..d {
                let diff = sig[c * p + u] - z[c];
                dist += diff * diff;
                gs[c * p + u] += 2.0 * wu * diff;
            }
            gw[u] = dist;
            part += wu * dist;
        }
        value += part;
    }
    ScatterOutput { value, grad_weights, grad_signal }
}

/// Mask restricted to `Ω` and resampled to the signal grid, i.e. the weights
/// the consistency losses and descriptors actually use.
#[derive(Debug, Clone)]
pub struct PartWeights {
    pub weights: Tensor3,
    pool: AreaPool,
    fg: Vec<f64>,
}

impl PartWeights {
    pub fn new(mask: &SoftMask, fg: &ForegroundMask, grid: (usize, usize)) -> Result<Self> {
        fg.check_shape(mask.height(), mask.width())?;
        if fg.count() == 0 {
            return Err(Error::EmptyForeground);
        }
        let fgw = fg.as_weights();
        let t = mask.tensor();
        let p = t.plane();
        let mut restricted = t.clone();
        for k in 0..t.channels() {
            let ch = restricted.channel_mut(k);
            for u in 0..p {
                ch[u] *= fgw[u];
            }
        }
        let pool = AreaPool::new(mask.height(), mask.width(), grid.0, grid.1);
        Ok(Self { weights: pool.apply(&restricted), pool, fg: fgw })
    }

    /// Pulls a gradient on the pooled weights back onto the mask.
    pub fn backward(&self, grad_weights: &Tensor3) -> Tensor3 {
        let mut g = self.pool.adjoint(grad_weights);
        let p = g.plane();
        for k in 0..g.channels() {
            let ch = g.channel_mut(k);
            for u in 0..p {
                ch[u] *= self.fg[u];
            }
        }
        g
    }

    pub fn masses(&self) -> Vec<f64> {
        (0..self.weights.channels()).map(|k| self.weights.channel(k).iter().sum()).collect()
    }
}

/// Per-image loss value with gradients on mask and signal.
#[derive(Debug, Clone)]
pub struct MaskLossOutput {
    pub value: f64,
    pub grad_mask: Tensor3,
    pub grad_signal: Tensor3,
}

fn masked_scatter(signal: &Tensor3, mask: &SoftMask, fg: &ForegroundMask) -> Result<MaskLossOutput> {
    let pw = PartWeights::new(mask, fg, (signal.height(), signal.width()))?;
    let out = weighted_scatter(signal, &pw.weights);
    Ok(MaskLossOutput { value: out.value, grad_mask: pw.backward(&out.grad_weights), grad_signal: out.grad_signal })
}

/// Feature loss `L_f`: within-part variance of perceptual features. The
/// mask is area-pooled to the feature grid.
pub fn feature_loss(features: &FeatureMap, mask: &SoftMask, fg: &ForegroundMask) -> Result<f64> {
    Ok(feature_loss_with_grad(features, mask, fg)?.value)
}

pub fn feature_loss_with_grad(features: &FeatureMap, mask: &SoftMask, fg: &ForegroundMask) -> Result<MaskLossOutput> {
    masked_scatter(features.tensor(), mask, fg)
}

/// Visual loss `L_v`: within-part colour variance at full resolution.
pub fn visual_loss(image: &Image, mask: &SoftMask, fg: &ForegroundMask) -> Result<f64> {
    Ok(visual_loss_with_grad(image.tensor(), mask, fg)?.value)
}

/// Visual loss on a raw colour tensor. Accepts grids smaller than the
/// minimum [`Image`] size, which the gradient tests rely on.
pub fn visual_loss_with_grad(image: &Tensor3, mask: &SoftMask, fg: &ForegroundMask) -> Result<MaskLossOutput> {
    if (image.height(), image.width()) != (mask.height(), mask.width()) {
        return Err(Error::Shape("visual loss runs at mask resolution".into()));
    }
    masked_scatter(image, mask, fg)
}

/// Descriptor `z_k` of one part.
pub fn part_descriptor(features: &FeatureMap, mask: &SoftMask, fg: &ForegroundMask, k: usize) -> Result<PartDescriptor> {
    if k >= mask.parts() {
        return Err(Error::InvalidValue(format!("part {k} >= K = {}", mask.parts())));
    }
    let pw = PartWeights::new(mask, fg, (features.height(), features.width()))?;
    let weights = Tensor3::from_vec(1, features.height(), features.width(), pw.weights.channel(k).to_vec())?;
    match weighted_means(features.tensor(), &weights).pop().flatten() {
        Some((_, vector)) => Ok(PartDescriptor { vector, part: k, image: 0 }),
        None => Err(Error::EmptyPart { part: k, mass: pw.masses()[k] }),
    }
}

/// All `K` descriptors of one image, kept differentiable.
#[derive(Debug, Clone)]
pub struct ImageDescriptors {
    pub part_weights: PartWeights,
    /// `(mass, z_k)` per part; `None` if empty.
    pub parts: Vec<Option<(f64, Vec<f64>)>>,
}

impl ImageDescriptors {
    pub fn new(features: &FeatureMap, mask: &SoftMask, fg: &ForegroundMask) -> Result<Self> {
        let part_weights = PartWeights::new(mask, fg, (features.height(), features.width()))?;
        let parts = weighted_means(features.tensor(), &part_weights.weights);
        Ok(Self { part_weights, parts })
    }

    pub fn validity(&self) -> Vec<bool> {
        self.parts.iter().map(Option::is_some).collect()
    }

    /// Given `∂L/∂z_k` (`None` or zeros for unused parts), returns
    /// `(∂L/∂mask, ∂L/∂features)`.
    pub fn backward(&self, features: &FeatureMap, grad_z: &[Vec<f64>]) -> (Tensor3, Tensor3) {
        let x = features.tensor();
        let (d, h, w) = x.shape();
        let p = h * w;
        let sig = x.data();
        let weights = &self.part_weights.weights;
        let mut gw = Tensor3::zeros(weights.channels(), h, w);
        let mut gx = Tensor3::zeros(d, h, w);
        for (k, part) in self.parts.iter().enumerate() {
            let Some((mass, z)) = part else { continue };
            let gz = &grad_z[k];
            if gz.iter().all(|&g| g == 0.0) {
                continue;
            }
            let wk = weights.channel(k);
            let gwk = gw.channel_mut(k);
            for u in 0..p {
                let mut s = 0.0;
                for c in 0..d {
                    s += gz[c] * (sig[c * p + u] - z[c]);
                }
                gwk[u] = s / mass;
            }
            let gxd = gx.data_mut();
            for c in 0..d {
                let scale = gz[c] / mass;
                for u in 0..p {
                    gxd[c * p + u] += wk[u] * scale;
                }
            }
        }
        (self.part_weights.backward(&gw), gx)
    }
}
