//! The part segmenter `f: Image → SoftMask`.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::pool::AreaPool;
use crate::nn::{
    avg_pool2, avg_pool2_backward, concat_channels, resize_bilinear, softmax_backward, split_channels, upsample2,
    upsample2_backward, Activation, Conv2d, ConvGrad, Padding,
};
use crate::params::{ParamBlock, ParamFile};
use crate::types::{ForegroundMask, Image, SoftMask, Tensor3};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"PSEG";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    #[default]
    ToyUnet,
    /// Interface only; no backbone ships with this crate.
    ExternalBackbone,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmenterSpec {
    pub parts: usize,
    pub architecture: Architecture,
    /// Output side length as a fraction of the input's.
    pub resolution: f64,
}

impl SegmenterSpec {
    pub fn new(parts: usize) -> Self {
        Self { parts, architecture: Architecture::ToyUnet, resolution: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.parts < 2 {
            return Err(Error::config("K", format!("the segmenter needs K >= 2, got {}", self.parts)));
        }
        if !(self.resolution > 0.0 && self.resolution <= 1.0) {
            return Err(Error::config("resolution", format!("must lie in (0, 1], got {}", self.resolution)));
        }
        if self.architecture == Architecture::ExternalBackbone {
            return Err(Error::Architecture("external-backbone segmenters are not built into this crate".into()));
        }
        Ok(())
    }

    /// Mask grid for an `(height, width)` input.
    pub fn output_size(&self, height: usize, width: usize) -> (usize, usize) {
        let scale = |n: usize| ((n as f64 * self.resolution).round() as usize).max(1);
        (scale(height), scale(width))
    }

    fn descriptor(&self) -> String {
        format!("toy-unet widths={} resolution={}", ToyUnet::WIDTHS.map(|w| w.to_string()).join(","), self.resolution)
    }

    fn parse_descriptor(s: &str, parts: usize) -> Option<Self> {
        let rest = s.strip_prefix("toy-unet widths=")?;
        let (widths, res) = rest.split_once(" resolution=")?;
        if widths != ToyUnet::WIDTHS.map(|w| w.to_string()).join(",") {
            return None;
        }
        Some(Self { parts, architecture: Architecture::ToyUnet, resolution: res.parse().ok()? })
    }
}

/// Three-level encoder/decoder with skip connections.
///
/// Encoder: 3×3 convolutions at full, half and quarter resolution with 2×2
/// average pooling in between. Decoder: nearest upsampling, concatenation
/// with the skip, then a 1×1 convolution. The final 1×1 head starts at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyUnet {
    pub enc1: Conv2d,
    pub enc2: Conv2d,
    pub enc3: Conv2d,
    pub dec2: Conv2d,
    pub dec1: Conv2d,
    pub head: Conv2d,
}

pub const ACTIVATION: Activation = Activation::Silu;

/// Everything the backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    x0: Tensor3,
    col1: Vec<f64>,
    e1_pre: Tensor3,
    p1: Tensor3,
    col2: Vec<f64>,
    e2_pre: Tensor3,
    e2: Tensor3,
    p2: Tensor3,
    col3: Vec<f64>,
    e3_pre: Tensor3,
    cat2: Tensor3,
    d2_pre: Tensor3,
    cat1: Tensor3,
    d1_pre: Tensor3,
    d1: Tensor3,
    pub logits: Tensor3,
    pub mask: SoftMask,
}

impl ToyUnet {
    pub const WIDTHS: [usize; 3] = [16, 32, 64];
    pub const LAYERS: [&'static str; 6] = ["enc1", "enc2", "enc3", "dec2", "dec1", "head"];

    pub fn new(parts: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [a, b, c] = Self::WIDTHS;
        Self {
            enc1: Conv2d::init_uniform(3, a, 3, 1, Padding::Zero, &mut rng),
            enc2: Conv2d::init_uniform(a, b, 3, 1, Padding::Zero, &mut rng),
            enc3: Conv2d::init_uniform(b, c, 3, 1, Padding::Zero, &mut rng),
            dec2: Conv2d::init_uniform(c + b, b, 1, 1, Padding::Zero, &mut rng),
            dec1: Conv2d::init_uniform(b + a, a, 1, 1, Padding::Zero, &mut rng),
            head: Conv2d::zeros(a, parts, 1, 1, Padding::Zero),
        }
    }

    pub fn layers(&self) -> [&Conv2d; 6] {
        [&self.enc1, &self.enc2, &self.enc3, &self.dec2, &self.dec1, &self.head]
    }

    pub fn layers_mut(&mut self) -> [&mut Conv2d; 6] {
        [&mut self.enc1, &mut self.enc2, &mut self.enc3, &mut self.dec2, &mut self.dec1, &mut self.head]
    }

    pub fn zero_grads(&self) -> Vec<ConvGrad> {
        self.layers().iter().map(|l| l.zero_grad()).collect()
    }

    pub fn forward(&self, input: &Tensor3) -> ForwardCache {
        let (h, w) = (input.height(), input.width());
        let mut x0 = input.clone();
        x0.data_mut().iter_mut().for_each(|v| *v = 2.0 * *v - 1.0);
        let act = |t: &Tensor3| {
            let mut out = t.clone();
            ACTIVATION.apply(&mut out);
            out
        };

        let (e1_pre, col1) = self.enc1.forward(&x0);
        let e1 = act(&e1_pre);
        let p1 = avg_pool2(&e1);
        let (e2_pre, col2) = self.enc2.forward(&p1);
        let e2 = act(&e2_pre);
        let p2 = avg_pool2(&e2);
        let (e3_pre, col3) = self.enc3.forward(&p2);
        let e3 = act(&e3_pre);

        let cat2 = concat_channels(&upsample2(&e3, e2.height(), e2.width()), &e2);
        let (d2_pre, _) = self.dec2.forward(&cat2);
        let d2 = act(&d2_pre);
        let cat1 = concat_channels(&upsample2(&d2, h, w), &e1);
        let (d1_pre, _) = self.dec1.forward(&cat1);
        let d1 = act(&d1_pre);
        let (logits, _) = self.head.forward(&d1);
        let mask = SoftMask::from_logits(&logits);
        ForwardCache { x0, col1, e1_pre, p1, col2, e2_pre, e2, p2, col3, e3_pre, cat2, d2_pre, cat1, d1_pre, d1, logits, mask }
    }

    /// Accumulates parameter gradients for `∂L/∂logits` into `grads`.
    pub fn backward_logits(&self, cache: &ForwardCache, grad_logits: &Tensor3, grads: &mut [ConvGrad]) {
        let [g_enc1, g_enc2, g_enc3, g_dec2, g_dec1, g_head] = grads else { panic!("six gradient slots") };
        let (a, b, _) = (Self::WIDTHS[0], Self::WIDTHS[1], Self::WIDTHS[2]);
        let (h, w) = (cache.x0.height(), cache.x0.width());

        let mut g = self.head.backward(&cache.d1, &[], grad_logits, g_head, true).expect("input grad");
        ACTIVATION.backward(&cache.d1_pre, &mut g);
        let g_cat1 = self.dec1.backward(&cache.cat1, &[], &g, g_dec1, true).expect("input grad");
        let (g_up2, g_e1_skip) = split_channels(&g_cat1, b);
        let mut g = upsample2_backward(&g_up2, cache.e2.height(), cache.e2.width());
        ACTIVATION.backward(&cache.d2_pre, &mut g);
        let g_cat2 = self.dec2.backward(&cache.cat2, &[], &g, g_dec2, true).expect("input grad");
        let (g_up3, g_e2_skip) = split_channels(&g_cat2, Self::WIDTHS[2]);

        let mut g = upsample2_backward(&g_up3, cache.p2.height(), cache.p2.width());
        ACTIVATION.backward(&cache.e3_pre, &mut g);
        let g_p2 = self.enc3.backward(&cache.p2, &cache.col3, &g, g_enc3, true).expect("input grad");
        let mut g = avg_pool2_backward(&g_p2, cache.e2.height(), cache.e2.width());
        for (x, s) in g.data_mut().iter_mut().zip(g_e2_skip.data()) {
            *x += s;
        }
        ACTIVATION.backward(&cache.e2_pre, &mut g);
        let g_p1 = self.enc2.backward(&cache.p1, &cache.col2, &g, g_enc2, true).expect("input grad");
        let mut g = avg_pool2_backward(&g_p1, h, w);
        debug_assert_eq!(g.channels(), a);
        for (x, s) in g.data_mut().iter_mut().zip(g_e1_skip.data()) {
            *x += s;
        }
        ACTIVATION.backward(&cache.e1_pre, &mut g);
        self.enc1.backward(&cache.x0, &cache.col1, &g, g_enc1, false);
    }

    /// As [`ToyUnet::backward_logits`], starting from `∂L/∂mask`.
    pub fn backward_mask(&self, cache: &ForwardCache, grad_mask: &Tensor3, grads: &mut [ConvGrad]) {
        let g = softmax_backward(cache.mask.tensor(), grad_mask);
        self.backward_logits(cache, &g, grads);
    }

    pub fn parameter_count(&self) -> usize {
        self.layers().iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segmenter {
    pub spec: SegmenterSpec,
    pub net: ToyUnet,
}

impl Segmenter {
    pub fn new(spec: SegmenterSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        Ok(Self { spec, net: ToyUnet::new(spec.parts, seed) })
    }

    pub fn parts(&self) -> usize {
        self.spec.parts
    }

    /// The image resampled to the network's working grid.
    pub fn network_input(&self, image: &Image) -> Tensor3 {
        let (h, w) = (image.height(), image.width());
        let (oh, ow) = self.spec.output_size(h, w);
        if (oh, ow) == (h, w) {
            image.tensor().clone()
        } else {
            AreaPool::new(h, w, oh, ow).apply(image.tensor())
        }
    }

    pub fn forward_cached(&self, image: &Image) -> ForwardCache {
        self.net.forward(&self.network_input(image))
    }

    pub fn forward(&self, image: &Image) -> SoftMask {
        self.forward_cached(image).mask
    }

    /// The mask resampled to the image's own resolution.
    pub fn predict(&self, image: &Image) -> SoftMask {
        let mask = self.forward(image);
        if (mask.height(), mask.width()) == (image.height(), image.width()) {
            return mask;
        }
        let up = resize_bilinear(mask.tensor(), image.height(), image.width());
        SoftMask::new(up).expect("bilinear weights are convex")
    }

    pub fn to_param_file(&self, step: u64) -> ParamFile {
        let blocks = ToyUnet::LAYERS
            .iter()
            .zip(self.net.layers())
            .flat_map(|(name, l)| {
                [
                    ParamBlock::new(format!("{name}.weight"), vec![l.out_channels, l.in_channels, l.kernel, l.kernel], l.weight.clone()),
                    ParamBlock::new(format!("{name}.bias"), vec![l.out_channels], l.bias.clone()),
                ]
            })
            .collect();
        ParamFile {
            magic: CHECKPOINT_MAGIC,
            architecture: self.spec.descriptor(),
            parts: self.spec.parts as u32,
            step,
            blocks,
        }
    }

    pub fn save_checkpoint(&self, path: &Path, step: u64) -> Result<()> {
        self.to_param_file(step).save(path)
    }

    /// Loads a checkpoint, rebuilding the spec it was saved with. Returns
    /// the segmenter and its step counter.
    pub fn load_checkpoint(path: &Path) -> Result<(Self, u64)> {
        let file = ParamFile::load(path, CHECKPOINT_MAGIC)?;
        let spec = SegmenterSpec::parse_descriptor(&file.architecture, file.parts as usize).ok_or_else(|| {
            Error::Architecture(format!("{}: unknown architecture `{}`", path.display(), file.architecture))
        })?;
        let mut seg = Self::new(spec, 0)?;
        for (name, layer) in ToyUnet::LAYERS.iter().zip(seg.net.layers_mut()) {
            for (suffix, dst) in [("weight", &mut layer.weight), ("bias", &mut layer.bias)] {
                let key = format!("{name}.{suffix}");
                let block = file.block(&key).ok_or_else(|| Error::format(path, format!("missing block `{key}`")))?;
                if block.data.len() != dst.len() {
                    return Err(Error::format(path, format!("block `{key}` has {} values, expected {}", block.data.len(), dst.len())));
                }
                dst.copy_from_slice(&block.data);
            }
        }
        Ok((seg, file.step))
    }

    /// Like [`Segmenter::load_checkpoint`] but rejects any spec other than
    /// `expected`.
    pub fn load_matching(path: &Path, expected: &SegmenterSpec) -> Result<(Self, u64)> {
        let (seg, step) = Self::load_checkpoint(path)?;
        if seg.spec.parts != expected.parts {
            return Err(Error::Architecture(format!(
                "{} has K={} but the configuration expects K={}",
                path.display(),
                seg.spec.parts,
                expected.parts
            )));
        }
        if seg.spec != *expected {
            return Err(Error::Architecture(format!(
                "{} holds `{}`, expected `{}`",
                path.display(),
                seg.spec.descriptor(),
                expected.descriptor()
            )));
        }
        Ok((seg, step))
    }
}

/// Foreground resampled to a mask grid: a cell is foreground when at least
/// half of its area is.
pub fn resample_foreground(fg: &ForegroundMask, height: usize, width: usize) -> ForegroundMask {
    if (fg.height(), fg.width()) == (height, width) {
        return fg.clone();
    }
    let t = Tensor3::from_vec(1, fg.height(), fg.width(), fg.as_weights()).expect("fg shape");
    let pooled = AreaPool::new(fg.height(), fg.width(), height, width).apply(&t);
    ForegroundMask::new(height, width, pooled.data().iter().map(|&v| v >= 0.5).collect()).expect("shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(h: usize, w: usize, seed: usize) -> Image {
        Image::new(Tensor3::from_fn(3, h, w, |c, y, x| (((c + seed) * 31 + y * 7 + x * 13) % 17) as f64 / 16.0)).unwrap()
    }

    #[test]
    fn zero_head_gives_uniform_mask() {
        let seg = Segmenter::new(SegmenterSpec::new(4), 1).unwrap();
        let m = seg.forward(&image(12, 10, 0));
        assert!(m.tensor().data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn random_head_is_simplex_and_deterministic() {
        let mut seg = Segmenter::new(SegmenterSpec::new(3), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        seg.net.head = Conv2d::init_uniform(16, 3, 1, 1, Padding::Zero, &mut rng);
        let img = image(11, 9, 1);
        let a = seg.forward(&img);
        let b = seg.forward(&img);
        assert_eq!(a, b);
        assert_eq!((a.height(), a.width()), (11, 9));
        for u in 0..99 {
            let s: f64 = (0..3).map(|k| a.tensor().channel(k)[u]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn reduced_resolution_and_prediction_at_full_size() {
        let spec = SegmenterSpec { resolution: 0.5, ..SegmenterSpec::new(2) };
        let seg = Segmenter::new(spec, 0).unwrap();
        let img = image(16, 12, 2);
        assert_eq!(seg.forward(&img).tensor().shape(), (2, 8, 6));
        assert_eq!(seg.predict(&img).tensor().shape(), (2, 16, 12));
    }

    #[test]
    fn checkpoint_round_trip_size_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("seg.ckpt");
        let mut seg = Segmenter::new(SegmenterSpec::new(4), 3).unwrap();
        seg.net.head.weight.iter_mut().enumerate().for_each(|(i, w)| *w = (i as f64 * 0.37).sin());
        seg.save_checkpoint(&path, 17).unwrap();
        let file = seg.to_param_file(17);
        let size = std::fs::metadata(&path).unwrap().len() as usize;
        assert_eq!(size, seg.net.parameter_count() * 8 + file.header_len());

        let (back, step) = Segmenter::load_checkpoint(&path).unwrap();
        assert_eq!(step, 17);
        let img = image(9, 9, 3);
        assert_eq!(back.forward(&img), seg.forward(&img));

        let err = Segmenter::load_matching(&path, &SegmenterSpec::new(3)).unwrap_err().to_string();
        assert!(err.contains("K=4") && err.contains("K=3"), "{err}");
    }

    #[test]
    fn invalid_specs() {
        assert!(Segmenter::new(SegmenterSpec::new(1), 0).is_err());
        let ext = SegmenterSpec { architecture: Architecture::ExternalBackbone, ..SegmenterSpec::new(2) };
        assert!(matches!(Segmenter::new(ext, 0), Err(Error::Architecture(_))));
    }

    #[test]
    fn foreground_resampling() {
        let fg = ForegroundMask::from_fn(8, 8, |y, x| y < 4 && x < 5);
        let small = resample_foreground(&fg, 4, 4);
        assert_eq!(small.count(), 4 + 2);
    }
}
