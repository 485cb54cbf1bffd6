//! Symmetrised KL between a warped prediction and the prediction on the
//! warped image.

use crate::error::{Error, Result};
use crate::transforms::{Interpolation, TransformSpec, Warp};
use crate::types::{ForegroundMask, SoftMask, Tensor3};

/// Probabilities are clamped to `[KL_EPS, 1]` before taking logs.
pub const KL_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct EquivarianceOutput {
    pub value: f64,
    /// `∂L/∂f(I)`, on the original mask grid.
    pub grad_orig: Tensor3,
    /// `∂L/∂f(T(I))`.
    pub grad_transformed: Tensor3,
    /// Number of pixels that entered the sum.
    pub pixels: usize,
}

/// `Σ_{u∈Ω'} KL(T_u(f(I)) ‖ f_u(T(I))) + KL(f_u(T(I)) ‖ T_u(f(I)))`.
///
/// `Ω'` holds the pixels whose warp source lies inside the original grid,
/// intersected with `region` when given (typically the warped foreground).
pub fn equivariance_loss(
    mask_orig: &SoftMask,
    mask_transformed: &SoftMask,
    t: &TransformSpec,
    region: Option<&ForegroundMask>,
) -> Result<EquivarianceOutput> {
    let (k, h, w) = mask_orig.tensor().shape();
    if mask_transformed.tensor().shape() != (k, h, w) {
        return Err(Error::Shape("equivariance needs both masks on the same grid".into()));
    }
    if let Some(r) = region {
        r.check_shape(h, w)?;
    }
    let warp = Warp::new(t, h, w, Interpolation::Bilinear);
    let warped = warp.apply(mask_orig.tensor());
    let p = h * w;
    let a = warped.data();
    let b = mask_transformed.tensor().data();
    let mut ga = Tensor3::zeros(k, h, w);
    let mut gb = Tensor3::zeros(k, h, w);
    let (gad, gbd) = (ga.data_mut(), gb.data_mut());
    let mut value = 0.0;
    let mut pixels = 0;
    for u in 0..p {
        if !warp.validity()[u] || region.is_some_and(|r| !r.data()[u]) {
            continue;
        }
        pixels += 1;
        for c in 0..k {
            let (ra, rb) = (a[c * p + u], b[c * p + u]);
            let (pa, pb) = (ra.clamp(KL_EPS, 1.0), rb.clamp(KL_EPS, 1.0));
            let log_ratio = pa.ln() - pb.ln();
            // KL(a‖b) + KL(b‖a) = Σ (a − b)(ln a − ln b)
            value += (pa - pb) * log_ratio;
            if ra > KL_EPS {
                gad[c * p + u] = log_ratio + (pa - pb) / pa;
            }
            if rb > KL_EPS {
                gbd[c * p + u] = -log_ratio - (pa - pb) / pb;
            }
        }
    }
    if pixels == 0 {
        return Err(Error::DegenerateTransform);
    }
    Ok(EquivarianceOutput { value, grad_orig: warp.apply_adjoint(&ga), grad_transformed: gb, pixels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::LabelGrid;

    fn mask(k: usize, h: usize, w: usize, seed: usize) -> SoftMask {
        SoftMask::from_logits(&Tensor3::from_fn(k, h, w, |c, y, x| (((c + seed) * 13 + y * 5 + x * 3) % 7) as f64 * 0.3))
    }

    #[test]
    fn identity_with_equal_masks_is_zero() {
        let m = mask(3, 6, 6, 1);
        let out = equivariance_loss(&m, &m, &TransformSpec::identity(), None).unwrap();
        assert_eq!(out.value, 0.0);
        let photometric = TransformSpec::photometric(1.2, 0.8, 1.1).unwrap();
        assert_eq!(equivariance_loss(&m, &m, &photometric, None).unwrap().value, 0.0);
    }

    #[test]
    fn opposite_one_hot_masks() {
        let a = SoftMask::one_hot(&LabelGrid::filled(4, 5, 0), 2).unwrap();
        let b = SoftMask::one_hot(&LabelGrid::filled(4, 5, 1), 2).unwrap();
        let out = equivariance_loss(&a, &b, &TransformSpec::identity(), None).unwrap();
        // Scalar oracle: clamp, then evaluate both KL directions per pixel.
        let kl = |p: [f64; 2], q: [f64; 2]| -> f64 { (0..2).map(|i| p[i] * (p[i] / q[i]).ln()).sum() };
        let pa = [1.0, KL_EPS];
        let pb = [KL_EPS, 1.0];
        let per_pixel = kl(pa, pb) + kl(pb, pa);
        assert!((out.value - 20.0 * per_pixel).abs() < 1e-9 * out.value);
    }

    #[test]
    fn translation_out_of_frame_is_degenerate() {
        let m = mask(2, 8, 8, 0);
        let t = TransformSpec::geometric(0.0, 1.0, [1.5, 0.0]).unwrap();
        assert!(matches!(equivariance_loss(&m, &m, &t, None), Err(Error::DegenerateTransform)));
    }

    #[test]
    fn nonnegative_and_region_restricted() {
        let t = TransformSpec::geometric(11.0, 1.05, [0.05, -0.02]).unwrap();
        let (a, b) = (mask(3, 10, 10, 2), mask(3, 10, 10, 5));
        let full = equivariance_loss(&a, &b, &t, None).unwrap();
        let region = ForegroundMask::from_fn(10, 10, |y, _| y < 5);
        let part = equivariance_loss(&a, &b, &t, Some(&region)).unwrap();
        assert!(full.value > 0.0 && part.value >= 0.0 && part.value < full.value);
        assert!(part.pixels < full.pixels);
    }
}
