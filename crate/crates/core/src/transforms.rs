//! Random geometric and photometric transformations.
//!
//! Geometric warps are affine maps about the image centre, applied by
//! inverse sampling: every output pixel looks up its source location in the
//! input. Pixels whose source falls outside the input are reported invalid
//! instead of being zero-filled. The photometric part acts on images only;
//! its action on masks is the identity.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{ForegroundMask, Image, LabelGrid, Tensor3, IGNORE_LABEL};

/// Sampling ranges for [`sample_transform`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Rotation is drawn from `[-max_rotation_deg, max_rotation_deg]`.
    pub max_rotation_deg: f64,
    pub min_scale: f64,
    pub max_scale: f64,
    /// Translation per axis, as a fraction of the image size.
    pub max_translation: f64,
    /// Photometric factors are drawn from `[1 - j, 1 + j]`.
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            max_rotation_deg: 30.0,
            min_scale: 0.8,
            max_scale: 1.2,
            max_translation: 0.1,
            brightness: 0.3,
            contrast: 0.3,
            saturation: 0.3,
        }
    }
}

impl AugmentConfig {
    /// Ranges that always produce the identity transform.
    pub fn identity() -> Self {
        Self {
            max_rotation_deg: 0.0,
            min_scale: 1.0,
            max_scale: 1.0,
            max_translation: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("max_rotation_deg", self.max_rotation_deg),
            ("max_translation", self.max_translation),
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
        ];
        for (key, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(key, format!("must be a finite value >= 0, got {v}")));
            }
        }
        for (key, v) in [("brightness", self.brightness), ("contrast", self.contrast), ("saturation", self.saturation)] {
            if v >= 1.0 {
                return Err(Error::config(key, format!("jitter must be < 1, got {v}")));
            }
        }
        if !(self.min_scale > 0.0 && self.min_scale <= self.max_scale && self.max_scale.is_finite()) {
            return Err(Error::config(
                "min_scale",
                format!("need 0 < min_scale <= max_scale, got [{}, {}]", self.min_scale, self.max_scale),
            ));
        }
        if self.min_scale * self.min_scale <= TransformSpec::MIN_DET {
            return Err(Error::config("min_scale", "warp would be near-singular"));
        }
        Ok(())
    }
}

/// A concrete transformation `T`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformSpec {
    pub rotation_deg: f64,
    pub scale: f64,
    /// `(x, y)` translation as a fraction of `(W, H)`.
    pub translation: [f64; 2],
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    /// Seed the parameters were drawn from (0 for hand-built specs).
    pub seed: u64,
}

impl Default for TransformSpec {
    fn default() -> Self {
        Self::identity()
    }
}

impl TransformSpec {
    pub const MIN_DET: f64 = 0.1;

    pub fn identity() -> Self {
        Self {
            rotation_deg: 0.0,
            scale: 1.0,
            translation: [0.0, 0.0],
            brightness: 1.0,
            contrast: 1.0,
            saturation: 1.0,
            seed: 0,
        }
    }

    pub fn geometric(rotation_deg: f64, scale: f64, translation: [f64; 2]) -> Result<Self> {
        let t = Self { rotation_deg, scale, translation, ..Self::identity() };
        t.validate()?;
        Ok(t)
    }

    pub fn photometric(brightness: f64, contrast: f64, saturation: f64) -> Result<Self> {
        let t = Self { brightness, contrast, saturation, ..Self::identity() };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale * self.scale > Self::MIN_DET) {
            return Err(Error::InvalidValue(format!("|det| = {} is near-singular", self.scale * self.scale)));
        }
        if [self.brightness, self.contrast, self.saturation].iter().any(|f| !(*f >= 0.0 && f.is_finite())) {
            return Err(Error::InvalidValue("photometric factors must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn is_geometric_identity(&self) -> bool {
        self.rotation_deg == 0.0 && self.scale == 1.0 && self.translation == [0.0, 0.0]
    }

    /// Linear part `s·R(θ)` acting on centred pixel coordinates `(x, y)`.
    pub fn linear(&self) -> [[f64; 2]; 2] {
        let (sin, cos) = self.rotation_deg.to_radians().sin_cos();
        [[self.scale * cos, -self.scale * sin], [self.scale * sin, self.scale * cos]]
    }

    /// Forward 2×3 pixel-space matrix for an `height × width` grid:
    /// `q = A·p + b`.
    pub fn matrix(&self, height: usize, width: usize) -> [[f64; 3]; 2] {
        let a = self.linear();
        let (cx, cy) = ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0);
        let (tx, ty) = (self.translation[0] * width as f64, self.translation[1] * height as f64);
        [
            [a[0][0], a[0][1], cx + tx - a[0][0] * cx - a[0][1] * cy],
            [a[1][0], a[1][1], cy + ty - a[1][0] * cx - a[1][1] * cy],
        ]
    }

    /// The geometric inverse on an `height × width` grid (photometric part
    /// reset to identity).
    pub fn inverse(&self, height: usize, width: usize) -> Self {
        let (tx, ty) = (self.translation[0] * width as f64, self.translation[1] * height as f64);
        let inv = Self { rotation_deg: -self.rotation_deg, scale: 1.0 / self.scale, ..Self::identity() };
        let a = inv.linear();
        let itx = -(a[0][0] * tx + a[0][1] * ty);
        let ity = -(a[1][0] * tx + a[1][1] * ty);
        Self { translation: [itx / width as f64, ity / height as f64], seed: self.seed, ..inv }
    }
}

/// Draws a transform whose parameters are a pure function of one seed taken
/// from `rng`.
pub fn sample_transform<R: Rng + ?Sized>(config: &AugmentConfig, rng: &mut R) -> Result<TransformSpec> {
    config.validate()?;
    Ok(transform_from_seed(config, rng.random()))
}

pub fn transform_from_seed(config: &AugmentConfig, seed: u64) -> TransformSpec {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut sym = |m: f64| if m > 0.0 { r.random_range(-m..=m) } else { 0.0 };
    let rotation_deg = sym(config.max_rotation_deg);
    let tx = sym(config.max_translation);
    let ty = sym(config.max_translation);
    let brightness = 1.0 + sym(config.brightness);
    let contrast = 1.0 + sym(config.contrast);
    let saturation = 1.0 + sym(config.saturation);
    let scale = if config.max_scale > config.min_scale {
        r.random_range(config.min_scale..=config.max_scale)
    } else {
        config.min_scale
    };
    TransformSpec { rotation_deg, scale, translation: [tx, ty], brightness, contrast, saturation, seed }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interpolation {
    Bilinear,
    Nearest,
}

/// Precomputed inverse-sampling taps for one transform and grid size.
///
/// Output pixel `u` reads `Σ weight · input[index]` over its taps. Keeping
/// the taps explicit makes the adjoint (needed for gradients) exact.
#[derive(Debug, Clone)]
pub struct Warp {
    height: usize,
    width: usize,
    taps: Vec<[(usize, f64); 4]>,
    tap_count: Vec<u8>,
    valid: Vec<bool>,
}

impl Warp {
    pub fn new(t: &TransformSpec, height: usize, width: usize, interpolation: Interpolation) -> Self {
        let inv = t.inverse(height, width);
        let m = inv.matrix(height, width);
        let p = height * width;
        let mut taps = vec![[(0usize, 0.0f64); 4]; p];
        let mut tap_count = vec![0u8; p];
        let mut valid = vec![false; p];
        let (xmax, ymax) = (width as f64 - 1.0, height as f64 - 1.0);
        // Absorbs rounding in the inverse matrix so exact-integer warps stay exact.
        let snap = |v: f64| if (v - v.round()).abs() < 1e-9 { v.round() } else { v };
        for qy in 0..height {
            for qx in 0..width {
                let (fx, fy) = (qx as f64, qy as f64);
                let sx = snap(m[0][0] * fx + m[0][1] * fy + m[0][2]);
                let sy = snap(m[1][0] * fx + m[1][1] * fy + m[1][2]);
                let u = qy * width + qx;
                if !(sx >= 0.0 && sx <= xmax && sy >= 0.0 && sy <= ymax) {
                    continue;
                }
                valid[u] = true;
                match interpolation {
                    Interpolation::Nearest => {
                        let (ix, iy) = (sx.round() as usize, sy.round() as usize);
                        taps[u][0] = (iy * width + ix, 1.0);
                        tap_count[u] = 1;
                    }
                    Interpolation::Bilinear => {
                        let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
                        let (ax, ay) = (sx - x0 as f64, sy - y0 as f64);
                        let mut n = 0;
                        for (dy, wy) in [(0, 1.0 - ay), (1, ay)] {
                            for (dx, wx) in [(0, 1.0 - ax), (1, ax)] {
                                let w = wy * wx;
                                if w == 0.0 {
                                    continue;
                                }
                                taps[u][n] = ((y0 + dy) * width + x0 + dx, w);
                                n += 1;
                            }
                        }
                        tap_count[u] = n as u8;
                    }
                }
            }
        }
        Self { height, width, taps, tap_count, valid }
    }

    pub fn validity(&self) -> &[bool] {
        &self.valid
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    fn taps(&self, u: usize) -> &[(usize, f64)] {
        &self.taps[u][..self.tap_count[u] as usize]
    }

    /// Warps every channel; invalid pixels are zero.
    pub fn apply(&self, input: &Tensor3) -> Tensor3 {
        assert_eq!((input.height(), input.width()), (self.height, self.width), "warp grid size");
        let p = self.height * self.width;
        let mut out = Tensor3::zeros(input.channels(), self.height, self.width);
        for c in 0..input.channels() {
            let src = input.channel(c);
            let dst = out.channel_mut(c);
            for (u, d) in dst.iter_mut().enumerate().take(p) {
                let mut s = 0.0;
                for &(i, w) in self.taps(u) {
                    s += w * src[i];
                }
                *d = s;
            }
        }
        out
    }

    /// Transpose of [`Warp::apply`].
    pub fn apply_adjoint(&self, grad_out: &Tensor3) -> Tensor3 {
        let mut out = Tensor3::zeros(grad_out.channels(), self.height, self.width);
        for c in 0..grad_out.channels() {
            let g = grad_out.channel(c);
            let dst = out.channel_mut(c);
            for (u, &gu) in g.iter().enumerate() {
                for &(i, w) in self.taps(u) {
                    dst[i] += w * gu;
                }
            }
        }
        out
    }
}

/// Warps an image-like tensor; returns the warped tensor and the validity
/// mask.
pub fn apply_geometric(t: &TransformSpec, tensor: &Tensor3, interpolation: Interpolation) -> (Tensor3, Vec<bool>) {
    let warp = Warp::new(t, tensor.height(), tensor.width(), interpolation);
    (warp.apply(tensor), warp.valid)
}

/// Nearest-neighbour warp of a label grid; invalid pixels become ignored.
pub fn warp_labels(t: &TransformSpec, labels: &LabelGrid) -> LabelGrid {
    let warp = Warp::new(t, labels.height(), labels.width(), Interpolation::Nearest);
    let data = (0..labels.height() * labels.width())
        .map(|u| match warp.taps(u).first() {
            Some(&(i, _)) => labels.data()[i],
            None => IGNORE_LABEL,
        })
        .collect();
    LabelGrid::new(labels.height(), labels.width(), data).expect("same shape")
}

/// Nearest-neighbour warp of a foreground mask; invalid pixels are outside.
pub fn warp_foreground(t: &TransformSpec, fg: &ForegroundMask) -> ForegroundMask {
    let warp = Warp::new(t, fg.height(), fg.width(), Interpolation::Nearest);
    let data = (0..fg.height() * fg.width())
        .map(|u| warp.taps(u).first().is_some_and(|&(i, _)| fg.data()[i]))
        .collect();
    ForegroundMask::new(fg.height(), fg.width(), data).expect("same shape")
}

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Brightness, then contrast about the mean luminance, then saturation about
/// per-pixel luminance; clipped to `[0, 1]`.
pub fn apply_photometric(t: &TransformSpec, image: &Image) -> Image {
    let src = image.tensor();
    let (h, w) = (src.height(), src.width());
    let p = h * w;
    let mut out = src.clone();
    if t.brightness != 1.0 {
        out.data_mut().iter_mut().for_each(|v| *v *= t.brightness);
    }
    if t.contrast != 1.0 {
        let d = out.data();
        let mean = (0..p).map(|u| (0..3).map(|c| LUMA[c] * d[c * p + u]).sum::<f64>()).sum::<f64>() / p as f64;
        out.data_mut().iter_mut().for_each(|v| *v = mean + t.contrast * (*v - mean));
    }
    if t.saturation != 1.0 {
        let d = out.data_mut();
        for u in 0..p {
            let gray: f64 = (0..3).map(|c| LUMA[c] * d[c * p + u]).sum();
            for c in 0..3 {
                d[c * p + u] = gray + t.saturation * (d[c * p + u] - gray);
            }
        }
    }
    out.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Image::new(out).expect("clipped image keeps its invariants")
}

/// The full action of `T` on an image: geometric warp (invalid pixels are
/// zero) followed by the photometric jitter.
pub fn apply_to_image(t: &TransformSpec, image: &Image) -> Image {
    let warped = if t.is_geometric_identity() {
        image.clone()
    } else {
        let (tensor, _) = apply_geometric(t, image.tensor(), Interpolation::Bilinear);
        Image::new(clamp01(tensor)).expect("bilinear combination stays in range")
    };
    apply_photometric(t, &warped)
}

fn clamp01(mut t: Tensor3) -> Tensor3 {
    t.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::SoftMask;

    fn smooth(h: usize, w: usize) -> Tensor3 {
        Tensor3::from_fn(2, h, w, |c, y, x| {
            let (fx, fy) = (x as f64 / w as f64, y as f64 / h as f64);
            0.5 + 0.4 * (3.0 * fx + c as f64).sin() * (2.0 * fy).cos()
        })
    }

    #[test]
    fn identity_leaves_tensor_unchanged() {
        let t = smooth(9, 11);
        let (out, valid) = apply_geometric(&TransformSpec::identity(), &t, Interpolation::Bilinear);
        assert_eq!(out, t);
        assert!(valid.iter().all(|&v| v));
    }

    #[test]
    fn one_pixel_translation_nearest() {
        let t = Tensor3::from_fn(1, 8, 8, |_, y, x| (y * 8 + x) as f64);
        let spec = TransformSpec::geometric(0.0, 1.0, [1.0 / 8.0, 0.0]).unwrap();
        let (out, valid) = apply_geometric(&spec, &t, Interpolation::Nearest);
        for y in 0..8 {
            assert!(!valid[y * 8]);
            for x in 1..8 {
                assert!(valid[y * 8 + x]);
                assert_eq!(out.at(0, y, x), t.at(0, y, x - 1));
            }
        }
    }

    #[test]
    fn warp_round_trip_within_tolerance() {
        let t = smooth(32, 32);
        let spec = TransformSpec::geometric(17.0, 1.1, [0.05, -0.04]).unwrap();
        let (fwd, v1) = apply_geometric(&spec, &t, Interpolation::Bilinear);
        let inv = spec.inverse(32, 32);
        let (back, v2) = apply_geometric(&inv, &fwd, Interpolation::Bilinear);
        // A pixel is jointly valid when its round trip never touched an
        // invalid intermediate sample.
        let warp = Warp::new(&inv, 32, 32, Interpolation::Bilinear);
        let mut checked = 0;
        for u in 0..32 * 32 {
            if !v2[u] || warp.taps(u).iter().any(|&(i, _)| !v1[i]) {
                continue;
            }
            checked += 1;
            for c in 0..2 {
                assert!((back.data()[c * 1024 + u] - t.data()[c * 1024 + u]).abs() < 2e-2);
            }
        }
        assert!(checked > 500);
    }

    #[test]
    fn adjoint_is_transpose() {
        let spec = TransformSpec::geometric(-23.0, 0.9, [0.03, 0.07]).unwrap();
        let warp = Warp::new(&spec, 10, 12, Interpolation::Bilinear);
        let x = smooth(10, 12);
        let g = Tensor3::from_fn(2, 10, 12, |c, y, x| ((c + 2 * y + 3 * x) % 7) as f64 - 3.0);
        let lhs: f64 = warp.apply(&x).data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(warp.apply_adjoint(&g).data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn warped_soft_mask_stays_on_simplex() {
        let logits = Tensor3::from_fn(3, 16, 16, |c, y, x| ((c * 7 + y * 3 + x) % 5) as f64 * 0.7);
        let mask = SoftMask::from_logits(&logits);
        let spec = TransformSpec::geometric(12.0, 1.15, [0.02, 0.0]).unwrap();
        let (out, valid) = apply_geometric(&spec, mask.tensor(), Interpolation::Bilinear);
        for u in 0..256 {
            if valid[u] {
                let s: f64 = (0..3).map(|c| out.data()[c * 256 + u]).sum();
                assert!((s - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn geometric_action_commutes_with_channel_permutation() {
        let mask = SoftMask::from_logits(&smooth(12, 12));
        let spec = TransformSpec::geometric(8.0, 0.95, [0.0, 0.05]).unwrap();
        let a = apply_geometric(&spec, mask.permute_parts(&[1, 0]).tensor(), Interpolation::Bilinear).0;
        let b = apply_geometric(&spec, mask.tensor(), Interpolation::Bilinear).0;
        for y in 0..12 {
            for x in 0..12 {
                assert_eq!(a.at(0, y, x), b.at(1, y, x));
                assert_eq!(a.at(1, y, x), b.at(0, y, x));
            }
        }
    }

    #[test]
    fn stronger_translation_never_adds_valid_pixels() {
        let mut prev = usize::MAX;
        for step in 0..8 {
            let spec = TransformSpec::geometric(0.0, 1.0, [step as f64 * 0.03, 0.0]).unwrap();
            let n = Warp::new(&spec, 20, 20, Interpolation::Bilinear).valid_count();
            assert!(n <= prev);
            prev = n;
        }
    }

    #[test]
    fn photometric_examples() {
        let img = Image::new(smooth(8, 8).clone_channels3()).unwrap();
        assert_eq!(apply_photometric(&TransformSpec::identity(), &img), img);
        let dark = apply_photometric(&TransformSpec::photometric(0.0, 1.0, 1.0).unwrap(), &img);
        assert!(dark.tensor().data().iter().all(|&v| v == 0.0));
        let flat = Image::new(Tensor3::filled(3, 8, 8, 0.25)).unwrap();
        let out = apply_photometric(&TransformSpec::photometric(1.0, 1.7, 1.0).unwrap(), &flat);
        for (a, b) in out.tensor().data().iter().zip(flat.tensor().data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sampling_is_deterministic_and_bounded() {
        let cfg = AugmentConfig::default();
        assert_eq!(transform_from_seed(&cfg, 42), transform_from_seed(&cfg, 42));
        let id = transform_from_seed(&AugmentConfig::identity(), 7);
        assert!(id.is_geometric_identity());
        assert_eq!((id.brightness, id.contrast, id.saturation), (1.0, 1.0, 1.0));

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 10_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let t = sample_transform(&cfg, &mut rng).unwrap();
            assert!(t.rotation_deg.abs() <= 30.0);
            assert!((0.8..=1.2).contains(&t.scale));
            assert!(t.translation.iter().all(|v| v.abs() <= 0.1));
            sum += t.rotation_deg;
        }
        // Uniform on [-30, 30]: σ = 30/√3, so the mean has σ/√n.
        let sigma_mean = 30.0 / 3f64.sqrt() / (n as f64).sqrt();
        assert!((sum / n as f64).abs() < 3.0 * sigma_mean);
    }

    #[test]
    fn invalid_ranges_rejected() {
        let cfg = AugmentConfig { min_scale: 1.2, max_scale: 0.8, ..AugmentConfig::default() };
        assert!(cfg.validate().is_err());
        let cfg = AugmentConfig { max_rotation_deg: -1.0, ..AugmentConfig::default() };
        assert!(cfg.validate().is_err());
    }

    impl Tensor3 {
        fn clone_channels3(&self) -> Tensor3 {
            Tensor3::from_fn(3, self.height(), self.width(), |c, y, x| self.at(c.min(1), y, x))
        }
    }
}
