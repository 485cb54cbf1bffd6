//! Procedural part dataset.
//!
//! Each object is a union of `K` ellipses placed on a template and posed by
//! a random similarity transform. A pixel belongs to the part whose ellipse
//! it is nearest to (in normalised ellipse distance) as long as it lies
//! inside at least one ellipse, so part regions are disjoint and cover the
//! foreground exactly.
//!
//! The default appearances pair a solid red part with a striped part of the
//! same mean colour, and a solid blue part with it, so some parts differ
//! only in texture and some only in colour.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{write_image, write_keypoints, write_labels, write_mask, DatasetManifest, ManifestEntry, Sample, Split, MANIFEST_NAME};
use crate::error::{Error, Result};
use crate::types::{ForegroundMask, Image, Keypoint, KeypointSet, LabelGrid, Tensor3};

pub const STRIPE_PERIOD: f64 = 4.0;
pub const STRIPE_AMPLITUDE: f64 = 0.2;
pub const NOISE_AMPLITUDE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Texture {
    Solid,
    /// Square-wave stripes around the base colour; same mean colour.
    Stripes,
    /// Independent uniform per-pixel noise around the base colour.
    NoiseTexture,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartAppearance {
    pub color: [f64; 3],
    pub texture: Texture,
    /// Standard deviation of the per-sample colour offset.
    #[serde(default = "default_jitter")]
    pub jitter: f64,
}

fn default_jitter() -> f64 {
    0.03
}

const PALETTE: [PartAppearance; 8] = [
    PartAppearance { color: [0.80, 0.22, 0.20], texture: Texture::Solid, jitter: 0.03 },
    PartAppearance { color: [0.80, 0.22, 0.20], texture: Texture::Stripes, jitter: 0.03 },
    PartAppearance { color: [0.20, 0.30, 0.80], texture: Texture::Solid, jitter: 0.03 },
    PartAppearance { color: [0.25, 0.70, 0.30], texture: Texture::NoiseTexture, jitter: 0.03 },
    PartAppearance { color: [0.85, 0.80, 0.25], texture: Texture::Solid, jitter: 0.03 },
    PartAppearance { color: [0.25, 0.75, 0.80], texture: Texture::Stripes, jitter: 0.03 },
    PartAppearance { color: [0.75, 0.30, 0.75], texture: Texture::NoiseTexture, jitter: 0.03 },
    PartAppearance { color: [0.90, 0.55, 0.15], texture: Texture::Solid, jitter: 0.03 },
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub parts: usize,
    pub height: usize,
    pub width: usize,
    pub train: usize,
    pub test: usize,
    pub seed: u64,
    /// 0 gives a flat background; 1 the busiest one.
    pub clutter: f64,
    pub max_rotation_deg: f64,
    pub min_scale: f64,
    pub max_scale: f64,
    /// Maximum object shift as a fraction of the image size.
    pub max_translation: f64,
    /// Relative jitter of the template's part centres and axes.
    pub deformation: f64,
    /// Object radius as a fraction of half the shorter image side.
    pub object_size: f64,
    /// One entry per part; empty selects the built-in palette.
    pub appearances: Vec<PartAppearance>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            parts: 4,
            height: 64,
            width: 64,
            train: 500,
            test: 100,
            seed: 0,
            clutter: 0.5,
            max_rotation_deg: 20.0,
            min_scale: 0.85,
            max_scale: 1.15,
            max_translation: 0.06,
            deformation: 0.1,
            object_size: 0.8,
            appearances: Vec::new(),
        }
    }
}

impl SyntheticSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::toml(text, &e))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, key: &str, msg: String| if ok { Ok(()) } else { Err(Error::config(key, msg)) };
        check(self.parts >= 1, "parts", "need at least one part".into())?;
        check(
            self.parts <= PALETTE.len() || self.appearances.len() == self.parts,
            "appearances",
            format!("the built-in palette covers {} parts; give one appearance per part", PALETTE.len()),
        )?;
        check(
            self.appearances.is_empty() || self.appearances.len() == self.parts,
            "appearances",
            format!("{} appearances for {} parts", self.appearances.len(), self.parts),
        )?;
        check(self.height >= Image::MIN_SIDE && self.width >= Image::MIN_SIDE, "height/width", format!("images must be at least {0}x{0}", Image::MIN_SIDE))?;
        check(self.train + self.test >= 1, "train/test", "no samples requested".into())?;
        check((0.0..=1.0).contains(&self.clutter), "clutter", format!("must lie in [0, 1], got {}", self.clutter))?;
        check(self.max_rotation_deg >= 0.0, "max_rotation_deg", "must be >= 0".into())?;
        check(self.min_scale > 0.0 && self.min_scale <= self.max_scale, "min_scale/max_scale", "need 0 < min <= max".into())?;
        check((0.0..0.5).contains(&self.max_translation), "max_translation", "must lie in [0, 0.5)".into())?;
        check((0.0..0.5).contains(&self.deformation), "deformation", "must lie in [0, 0.5)".into())?;
        check(self.object_size > 0.0 && self.object_size <= 1.0, "object_size", "must lie in (0, 1]".into())?;
        for a in &self.appearances {
            check(a.color.iter().all(|c| (0.0..=1.0).contains(c)), "appearances.color", "components must lie in [0, 1]".into())?;
            check(a.jitter >= 0.0, "appearances.jitter", "must be >= 0".into())?;
        }
        Ok(())
    }

    pub fn appearance(&self, k: usize) -> PartAppearance {
        if self.appearances.is_empty() {
            PALETTE[k]
        } else {
            self.appearances[k]
        }
    }

    /// Label used for background pixels in the part label grids.
    pub fn background_label(&self) -> i32 {
        self.parts as i32
    }
}

/// Ellipse in object coordinates (roughly `[-1, 1]²`).
#[derive(Debug, Clone, Copy)]
struct Ellipse {
    center: [f64; 2],
    axes: [f64; 2],
}

fn template(parts: usize) -> Vec<Ellipse> {
    if parts == 4 {
        return vec![
            Ellipse { center: [0.0, -0.62], axes: [0.30, 0.28] },
            Ellipse { center: [0.0, -0.02], axes: [0.40, 0.36] },
            Ellipse { center: [0.0, 0.60], axes: [0.32, 0.30] },
            Ellipse { center: [0.55, 0.02], axes: [0.22, 0.40] },
        ];
    }
    if parts == 1 {
        return vec![Ellipse { center: [0.0, 0.0], axes: [0.6, 0.8] }];
    }
    // A bent chain of overlapping ellipses.
    let step = 1.6 / (parts - 1) as f64;
    let r = (0.55 * step).clamp(0.12, 0.5);
    (0..parts)
        .map(|k| Ellipse { center: [0.3 * (k as f64 * 1.7).sin(), -0.8 + step * k as f64], axes: [r * 1.2, r] })
        .collect()
}

/// Generated sample before quantisation, plus its exact ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub sample: Sample,
    pub split: Split,
}

pub fn sample_id(index: usize) -> String {
    format!("s{index:05}")
}

/// Exact centroids of each part's pixels, invisible where a part is absent.
pub fn part_centroids(labels: &LabelGrid, parts: usize) -> KeypointSet {
    let (h, w) = (labels.height(), labels.width());
    let mut sums = vec![(0.0, 0.0, 0usize); parts];
    for y in 0..h {
        for x in 0..w {
            let l = labels.get(y, x);
            if l >= 0 && (l as usize) < parts {
                let s = &mut sums[l as usize];
                s.0 += x as f64 + 0.5;
                s.1 += y as f64 + 0.5;
                s.2 += 1;
            }
        }
    }
    KeypointSet(
        sums.into_iter()
            .map(|(sx, sy, n)| {
                if n == 0 {
                    Keypoint { x: 0.0, y: 0.0, visible: false }
                } else {
                    Keypoint { x: sx / n as f64 / w as f64, y: sy / n as f64 / h as f64, visible: true }
                }
            })
            .collect(),
    )
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

pub fn generate_sample(spec: &SyntheticSpec, index: usize) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let (h, w) = (spec.height, spec.width);
    let k = spec.parts;
    let normal = Normal::new(0.0, 1.0).expect("unit normal");

    let d = spec.deformation;
    let ellipses: Vec<Ellipse> = template(k)
        .into_iter()
        .map(|e| Ellipse {
            center: [e.center[0] + rng.random_range(-d..=d) * 0.5, e.center[1] + rng.random_range(-d..=d) * 0.5],
            axes: [e.axes[0] * (1.0 + rng.random_range(-d..=d)), e.axes[1] * (1.0 + rng.random_range(-d..=d))],
        })
        .collect();
    let theta = rng.random_range(-spec.max_rotation_deg..=spec.max_rotation_deg).to_radians();
    let scale = rng.random_range(spec.min_scale..=spec.max_scale);
    let t = spec.max_translation;
    let shift = [rng.random_range(-t..=t) * w as f64, rng.random_range(-t..=t) * h as f64];
    let radius = spec.object_size * h.min(w) as f64 / 2.0 * scale;
    let (sin, cos) = theta.sin_cos();
    let centre = [(w as f64 - 1.0) / 2.0 + shift[0], (h as f64 - 1.0) / 2.0 + shift[1]];

    let colors: Vec<[f64; 3]> = (0..k)
        .map(|p| {
            let a = spec.appearance(p);
            let offset: [f64; 3] = std::array::from_fn(|_| normal.sample(&mut rng) * a.jitter);
            std::array::from_fn(|c| a.color[c] + offset[c])
        })
        .collect();
    let stripe_phase = rng.random_range(0.0..STRIPE_PERIOD);

    let bg_base: [f64; 3] = std::array::from_fn(|c| [0.55, 0.52, 0.45][c] + rng.random_range(-0.05..=0.05));
    let blobs: Vec<([f64; 2], f64, [f64; 3])> = (0..(6.0 * spec.clutter).round() as usize)
        .map(|_| {
            let pos = [rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64)];
            let r = rng.random_range(4.0..12.0) * h.min(w) as f64 / 64.0;
            let col: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
            (pos, r, col)
        })
        .collect();

    let mut labels = vec![-1i32; h * w];
    let mut data = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let u = y * w + x;
            let (dx, dy) = (x as f64 - centre[0], y as f64 - centre[1]);
            // Object coordinates: undo rotation, then scale.
            let ox = (cos * dx + sin * dy) / radius;
            let oy = (-sin * dx + cos * dy) / radius;
            let mut best = (f64::INFINITY, 0usize);
            for (p, e) in ellipses.iter().enumerate() {
                let ex = (ox - e.center[0]) / e.axes[0];
                let ey = (oy - e.center[1]) / e.axes[1];
                let dist = (ex * ex + ey * ey).sqrt();
                if dist < best.0 {
                    best = (dist, p);
                }
            }
            let pixel: [f64; 3] = if best.0 <= 1.0 {
                let p = best.1;
                labels[u] = p as i32;
                let base = colors[p];
                match spec.appearance(p).texture {
                    Texture::Solid => base,
                    Texture::Stripes => {
                        // Stripes run along the object's horizontal axis.
                        let s = ox * radius + stripe_phase;
                        let sign = if s.rem_euclid(STRIPE_PERIOD) < STRIPE_PERIOD / 2.0 { 1.0 } else { -1.0 };
                        base.map(|c| c + sign * STRIPE_AMPLITUDE)
                    }
                    Texture::NoiseTexture => {
                        let n = rng.random_range(-NOISE_AMPLITUDE..=NOISE_AMPLITUDE);
                        base.map(|c| c + n)
                    }
                }
            } else {
                let mut c = bg_base;
                for (pos, r, col) in &blobs {
                    let d2 = ((x as f64 - pos[0]).powi(2) + (y as f64 - pos[1]).powi(2)) / (r * r);
                    let a = 0.6 * spec.clutter * (-d2).exp();
                    for i in 0..3 {
                        c[i] = c[i] * (1.0 - a) + col[i] * a;
                    }
                }
                let n = 0.05 * spec.clutter;
                if n > 0.0 {
                    c.iter_mut().for_each(|v| *v += rng.random_range(-n..=n));
                }
                c
            };
            for c in 0..3 {
                data[c * h * w + u] = quantize(pixel[c]);
            }
        }
    }

    let fg = ForegroundMask::new(h, w, labels.iter().map(|&l| l >= 0).collect()).expect("shape");
    let parts = LabelGrid::new(h, w, labels).expect("shape");
    let keypoints = part_centroids(&parts, k);
    let parts = parts.with_background(&fg, spec.background_label());
    Sample {
        id: sample_id(index),
        class: None,
        image: Image::new(Tensor3::from_vec(3, h, w, data).expect("shape")).expect("quantised values lie in [0, 1]"),
        fg,
        keypoints: Some(keypoints),
        parts: Some(parts),
    }
}

/// All samples in manifest order: the training split first.
pub fn generate_samples(spec: &SyntheticSpec) -> Result<Vec<SyntheticSample>> {
    spec.validate()?;
    Ok((0..spec.train + spec.test)
        .map(|i| SyntheticSample {
            sample: generate_sample(spec, i),
            split: if i < spec.train { Split::Train } else { Split::Test },
        })
        .collect())
}

/// Writes the dataset under `out` and returns the manifest path.
pub fn generate(spec: &SyntheticSpec, out: &Path) -> Result<PathBuf> {
    let samples = generate_samples(spec)?;
    for sub in ["images", "masks", "parts", "keypoints"] {
        let dir = out.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let mut entries = Vec::with_capacity(samples.len());
    for s in &samples {
        let id = &s.sample.id;
        let rel = |dir: &str, ext: &str| PathBuf::from(dir).join(format!("{id}.{ext}"));
        let entry = ManifestEntry {
            id: id.clone(),
            split: s.split,
            image: rel("images", "png"),
            fg: rel("masks", "png"),
            keypoints: Some(rel("keypoints", "txt")),
            parts: Some(rel("parts", "png")),
            class: None,
        };
        write_image(&out.join(&entry.image), &s.sample.image)?;
        write_mask(&out.join(&entry.fg), &s.sample.fg)?;
        write_labels(&out.join(entry.parts.as_ref().expect("set")), s.sample.parts.as_ref().expect("generated"))?;
        write_keypoints(&out.join(entry.keypoints.as_ref().expect("set")), s.sample.keypoints.as_ref().expect("generated"))?;
        entries.push(entry);
    }
    let manifest = DatasetManifest { root: out.to_path_buf(), entries };
    let path = out.join(MANIFEST_NAME);
    manifest.save(&path)?;
    Ok(path)
}
