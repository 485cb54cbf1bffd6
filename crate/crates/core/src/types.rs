//! Shared tensor-shaped domain types.
//!
//! Everything is stored as row-major `f64` (or integer) grids. Constructors
//! validate the invariants each type carries so that downstream code can
//! rely on them without re-checking.

use crate::error::{Error, Result};

/// Parts whose soft mass falls at or below this are treated as empty.
pub const EPS_MASS: f64 = 1e-6;

/// Absolute tolerance on the per-pixel simplex constraint of [`SoftMask`].
pub const SIMPLEX_TOL: f64 = 1e-5;

/// Label value marking pixels that are not scored.
pub const IGNORE_LABEL: i32 = -1;

/// A dense `(channels, height, width)` grid of reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width, data: vec![0.0; channels * height * width] }
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self { channels, height, width, data: vec![value; channels * height * width] }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "expected {}x{}x{} = {} values, got {}",
                channels,
                height,
                width,
                channels * height * width,
                data.len()
            )));
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self { channels, height, width, data }
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut f64 {
        &mut self.data[(c * self.height + y) * self.width + x]
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let p = self.plane();
        &self.data[c * p..(c + 1) * p]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let p = self.plane();
        &mut self.data[c * p..(c + 1) * p]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// An RGB image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image(Tensor3);

impl Image {
    pub const MIN_SIDE: usize = 8;

    pub fn new(tensor: Tensor3) -> Result<Self> {
        if tensor.channels() != 3 {
            return Err(Error::Shape(format!("image needs 3 channels, got {}", tensor.channels())));
        }
        if tensor.height() < Self::MIN_SIDE || tensor.width() < Self::MIN_SIDE {
            return Err(Error::Shape(format!(
                "image must be at least {0}x{0}, got {1}x{2}",
                Self::MIN_SIDE,
                tensor.height(),
                tensor.width()
            )));
        }
        if let Some(v) = tensor.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidValue(format!("image value {v} outside [0, 1]")));
        }
        Ok(Self(tensor))
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }

    pub fn tensor(&self) -> &Tensor3 {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor3 {
        self.0
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        [self.0.at(0, y, x), self.0.at(1, y, x), self.0.at(2, y, x)]
    }
}

/// Binary object mask `Ω`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ForegroundMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl ForegroundMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "foreground mask {}x{} needs {} values, got {}",
                height,
                width,
                height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![true; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn contains(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    /// `|Ω|`.
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn as_weights(&self) -> Vec<f64> {
        self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    /// Morphological erosion with a `(2r+1)`-square structuring element.
    /// Pixels whose neighbourhood leaves the image are removed.
    pub fn erode(&self, radius: usize) -> Self {
        let r = radius as isize;
        Self::from_fn(self.height, self.width, |y, x| {
            for dy in -r..=r {
                for dx in -r..=r {
                    let yy = y as isize + dy;
                    let xx = x as isize + dx;
                    if yy < 0 || xx < 0 || yy >= self.height as isize || xx >= self.width as isize {
                        return false;
                    }
                    if !self.contains(yy as usize, xx as usize) {
                        return false;
                    }
                }
            }
            true
        })
    }

    pub(crate) fn check_shape(&self, height: usize, width: usize) -> Result<()> {
        if self.height != height || self.width != width {
            return Err(Error::Shape(format!(
                "foreground mask is {}x{}, expected {}x{}",
                self.height, self.width, height, width
            )));
        }
        Ok(())
    }
}

/// Per-pixel probability distribution over `K` parts.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftMask(Tensor3);

impl SoftMask {
    pub fn new(tensor: Tensor3) -> Result<Self> {
        if tensor.channels() == 0 {
            return Err(Error::Shape("soft mask needs at least one part".into()));
        }
        if let Some(v) = tensor.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidValue(format!("mask value {v} outside [0, 1]")));
        }
        let p = tensor.plane();
        for u in 0..p {
            let s: f64 = (0..tensor.channels()).map(|k| tensor.data()[k * p + u]).sum();
            if (s - 1.0).abs() > SIMPLEX_TOL {
                return Err(Error::InvalidValue(format!("mask channels sum to {s} at pixel {u}")));
            }
        }
        Ok(Self(tensor))
    }

    /// Pixel-wise softmax over the channel axis.
    pub fn from_logits(logits: &Tensor3) -> Self {
        let (k, h, w) = logits.shape();
        let p = h * w;
        let src = logits.data();
        let mut out = Tensor3::zeros(k, h, w);
        let dst = out.data_mut();
        for u in 0..p {
            let mut m = f64::NEG_INFINITY;
            for c in 0..k {
                m = m.max(src[c * p + u]);
            }
            let mut s = 0.0;
            for c in 0..k {
                let e = (src[c * p + u] - m).exp();
                dst[c * p + u] = e;
                s += e;
            }
            for c in 0..k {
                dst[c * p + u] /= s;
            }
        }
        Self(out)
    }

    /// One-hot mask of a label grid. Ignored pixels get the uniform
    /// distribution.
    pub fn one_hot(labels: &LabelGrid, parts: usize) -> Result<Self> {
        let (h, w) = (labels.height(), labels.width());
        let mut t = Tensor3::zeros(parts, h, w);
        for y in 0..h {
            for x in 0..w {
                let l = labels.get(y, x);
                if l == IGNORE_LABEL {
                    for k in 0..parts {
                        *t.at_mut(k, y, x) = 1.0 / parts as f64;
                    }
                } else if (l as usize) < parts {
                    *t.at_mut(l as usize, y, x) = 1.0;
                } else {
                    return Err(Error::InvalidValue(format!("label {l} >= part count {parts}")));
                }
            }
        }
        Ok(Self(t))
    }

    pub fn uniform(parts: usize, height: usize, width: usize) -> Self {
        Self(Tensor3::filled(parts, height, width, 1.0 / parts as f64))
    }

    pub fn parts(&self) -> usize {
        self.0.channels()
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }

    pub fn tensor(&self) -> &Tensor3 {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor3 {
        self.0
    }

    /// Reorders channels so that output channel `k` is input channel `perm[k]`.
    pub fn permute_parts(&self, perm: &[usize]) -> Self {
        let (k, h, w) = self.0.shape();
        assert_eq!(perm.len(), k);
        Self(Tensor3::from_fn(k, h, w, |c, y, x| self.0.at(perm[c], y, x)))
    }
}

/// Dense descriptor grid `φ(I)` of shape `(d, h, w)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap(Tensor3);

impl FeatureMap {
    pub fn new(tensor: Tensor3) -> Result<Self> {
        if !tensor.all_finite() {
            return Err(Error::InvalidValue("feature map contains non-finite values".into()));
        }
        Ok(Self(tensor))
    }

    /// The image itself viewed as a 3-channel feature map.
    pub fn from_image(image: &Image) -> Self {
        Self(image.tensor().clone())
    }

    pub fn dim(&self) -> usize {
        self.0.channels()
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }

    pub fn tensor(&self) -> &Tensor3 {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor3 {
        self.0
    }

    pub fn vector(&self, y: usize, x: usize) -> Vec<f64> {
        (0..self.dim()).map(|c| self.0.at(c, y, x)).collect()
    }
}

/// Mask-weighted mean feature of one part in one image.
#[derive(Debug, Clone, PartialEq)]
pub struct PartDescriptor {
    pub vector: Vec<f64>,
    pub part: usize,
    pub image: usize,
}

/// Integer part assignment per pixel; `-1` marks ignored pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelGrid {
    height: usize,
    width: usize,
    data: Vec<i32>,
}

impl LabelGrid {
    pub fn new(height: usize, width: usize, data: Vec<i32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "label grid {}x{} needs {} values, got {}",
                height,
                width,
                height * width,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|&&v| v < IGNORE_LABEL) {
            return Err(Error::InvalidValue(format!("label {v} is negative and not the ignore label")));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, label: i32) -> Self {
        Self { height, width, data: vec![label; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> i32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, label: i32) {
        self.data[y * self.width + x] = label;
    }

    pub fn data(&self) -> &[i32] {
        &self.data
    }

    /// One past the largest label present (0 if everything is ignored).
    pub fn num_labels(&self) -> usize {
        self.data.iter().copied().max().map_or(0, |m| (m + 1).max(0) as usize)
    }

    /// Relabels every pixel outside `fg` as `background`.
    pub fn with_background(&self, fg: &ForegroundMask, background: i32) -> Self {
        let data = self
            .data
            .iter()
            .zip(fg.data())
            .map(|(&l, &inside)| if inside { l } else { background })
            .collect();
        Self { height: self.height, width: self.width, data }
    }
}

/// Labels known only at a few pixel locations, e.g. keypoint annotations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparseLabels {
    height: usize,
    width: usize,
    points: Vec<((usize, usize), u32)>,
}

impl SparseLabels {
    /// `points` holds `((row, col), label)` pairs.
    pub fn new(height: usize, width: usize, points: Vec<((usize, usize), u32)>) -> Result<Self> {
        if let Some(((y, x), _)) = points.iter().find(|((y, x), _)| *y >= height || *x >= width) {
            return Err(Error::Shape(format!("sparse label at ({y}, {x}) outside {height}x{width}")));
        }
        Ok(Self { height, width, points })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn points(&self) -> &[((usize, usize), u32)] {
        &self.points
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    /// Column divided by `W`; pixel `j` has its centre at `(j + 0.5) / W`.
    pub x: f64,
    /// Row divided by `H`, same convention.
    pub y: f64,
    pub visible: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct KeypointSet(pub Vec<Keypoint>);

impl KeypointSet {
    pub fn new(points: Vec<Keypoint>) -> Result<Self> {
        for p in &points {
            if p.visible && !((0.0..=1.0).contains(&p.x) && (0.0..=1.0).contains(&p.y)) {
                return Err(Error::InvalidValue(format!(
                    "visible keypoint ({}, {}) outside [0, 1]^2",
                    p.x, p.y
                )));
            }
        }
        Ok(Self(points))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Keypoint> {
        self.0.iter()
    }

    pub fn get(&self, index: usize) -> Option<&Keypoint> {
        self.0.get(index)
    }
}

/// Argmax readout of a soft mask; ties go to the smallest part index.
pub fn hard_assign(mask: &SoftMask) -> LabelGrid {
    let t = mask.tensor();
    let (k, h, w) = t.shape();
    let p = h * w;
    let data = (0..p)
        .map(|u| {
            let mut best = 0;
            let mut best_v = t.data()[u];
            for c in 1..k {
                let v = t.data()[c * p + u];
                if v > best_v {
                    best = c;
                    best_v = v;
                }
            }
            best as i32
        })
        .collect();
    LabelGrid { height: h, width: w, data }
}

/// `|M_k| = Σ_{u∈Ω} M_{ku}` for every part.
pub fn mask_mass(mask: &SoftMask, fg: &ForegroundMask) -> Result<Vec<f64>> {
    fg.check_shape(mask.height(), mask.width())?;
    if fg.count() == 0 {
        return Err(Error::EmptyForeground);
    }
    let t = mask.tensor();
    Ok((0..t.channels())
        .map(|k| {
            t.channel(k)
                .iter()
                .zip(fg.data())
                .filter(|(_, &inside)| inside)
                .map(|(v, _)| *v)
                .sum()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random_mask(parts: usize, h: usize, w: usize, seed: u64) -> SoftMask {
        let mut s = seed;
        let logits = Tensor3::from_fn(parts, h, w, |_, _, _| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 6.0 - 3.0
        });
        SoftMask::from_logits(&logits)
    }

    #[test]
    fn hard_assign_one_hot_channel() {
        let mut t = Tensor3::zeros(3, 2, 2);
        for y in 0..2 {
            for x in 0..2 {
                *t.at_mut(2, y, x) = 1.0;
            }
        }
        let labels = hard_assign(&SoftMask::new(t).unwrap());
        assert!(labels.data().iter().all(|&l| l == 2));
    }

    #[test]
    fn hard_assign_uniform_ties_to_zero() {
        let labels = hard_assign(&SoftMask::uniform(4, 3, 3));
        assert!(labels.data().iter().all(|&l| l == 0));
    }

    #[test]
    fn hard_assign_direct_argmax() {
        let t = Tensor3::from_vec(3, 1, 1, vec![0.2, 0.5, 0.3]).unwrap();
        assert_eq!(hard_assign(&SoftMask::new(t).unwrap()).get(0, 0), 1);
    }

    #[test]
    fn mask_mass_uniform() {
        let fg = ForegroundMask::full(10, 10);
        let mass = mask_mass(&SoftMask::uniform(4, 10, 10), &fg).unwrap();
        for m in mass {
            assert!((m - 25.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mask_mass_one_hot_part_zero() {
        let labels = LabelGrid::filled(5, 6, 0);
        let fg = ForegroundMask::from_fn(5, 6, |y, x| (y + x) % 2 == 0);
        let mass = mask_mass(&SoftMask::one_hot(&labels, 3).unwrap(), &fg).unwrap();
        assert_eq!(mass, vec![fg.count() as f64, 0.0, 0.0]);
    }

    #[test]
    fn mask_mass_matches_direct_summation() {
        let mask = random_mask(3, 7, 5, 11);
        let fg = ForegroundMask::from_fn(7, 5, |y, x| (y * 5 + x) % 3 != 0);
        let mass = mask_mass(&mask, &fg).unwrap();
        for (k, m) in mass.iter().enumerate() {
            let mut oracle = 0.0;
            for y in 0..7 {
                for x in 0..5 {
                    if fg.contains(y, x) {
                        oracle += mask.tensor().at(k, y, x);
                    }
                }
            }
            assert!((m - oracle).abs() < 1e-12);
        }
        assert!((mass.iter().sum::<f64>() - fg.count() as f64).abs() < 1e-4);
    }

    #[test]
    fn mask_mass_empty_foreground() {
        let fg = ForegroundMask::new(2, 2, vec![false; 4]).unwrap();
        assert!(matches!(mask_mass(&SoftMask::uniform(2, 2, 2), &fg), Err(Error::EmptyForeground)));
    }

    #[test]
    fn invariants_rejected() {
        assert!(Image::new(Tensor3::zeros(3, 4, 8)).is_err());
        assert!(Image::new(Tensor3::filled(3, 8, 8, 1.5)).is_err());
        assert!(SoftMask::new(Tensor3::filled(2, 2, 2, 0.3)).is_err());
        assert!(LabelGrid::new(1, 2, vec![0, -2]).is_err());
        assert!(KeypointSet::new(vec![Keypoint { x: 1.2, y: 0.0, visible: true }]).is_err());
        assert!(KeypointSet::new(vec![Keypoint { x: 1.2, y: 0.0, visible: false }]).is_ok());
    }

    #[test]
    fn erosion_shrinks() {
        let fg = ForegroundMask::from_fn(10, 10, |y, x| (2..8).contains(&y) && (2..8).contains(&x));
        let e = fg.erode(1);
        assert_eq!(e.count(), 16);
    }

    proptest! {
        #[test]
        fn one_hot_then_argmax_is_identity(labels in proptest::collection::vec(0i32..5, 12)) {
            let grid = LabelGrid::new(3, 4, labels).unwrap();
            let back = hard_assign(&SoftMask::one_hot(&grid, 5).unwrap());
            prop_assert_eq!(back, grid);
        }

        #[test]
        fn mass_is_permutation_equivariant(seed in 0u64..1000) {
            let mask = random_mask(3, 4, 4, seed);
            let fg = ForegroundMask::from_fn(4, 4, |y, x| (y + 2 * x + seed as usize) % 3 != 0);
            let perm = [2, 0, 1];
            let base = mask_mass(&mask, &fg).unwrap();
            let permuted = mask_mass(&mask.permute_parts(&perm), &fg).unwrap();
            for k in 0..3 {
                prop_assert!((permuted[k] - base[perm[k]]).abs() < 1e-12);
            }
            prop_assert!((base.iter().sum::<f64>() - fg.count() as f64).abs() < 1e-4);
        }

        #[test]
        fn mass_is_linear(seed in 0u64..1000, a in 0.0f64..1.0) {
            let m1 = random_mask(2, 3, 3, seed);
            let m2 = random_mask(2, 3, 3, seed + 7);
            let mixed: Vec<f64> = m1.tensor().data().iter().zip(m2.tensor().data())
                .map(|(x, y)| a * x + (1.0 - a) * y).collect();
            let mix = SoftMask::new(Tensor3::from_vec(2, 3, 3, mixed).unwrap()).unwrap();
            let fg = ForegroundMask::full(3, 3);
            let lhs = mask_mass(&mix, &fg).unwrap();
            let r1 = mask_mass(&m1, &fg).unwrap();
            let r2 = mask_mass(&m2, &fg).unwrap();
            for k in 0..2 {
                prop_assert!((lhs[k] - (a * r1[k] + (1.0 - a) * r2[k])).abs() < 1e-12);
            }
        }
    }
}
