//! On-disk datasets: manifest, raster and keypoint files, loading.
//!
//! A manifest is a tab-separated text file with one sample per line:
//! `id  split  image  fg  keypoints  parts  class`, where the last three may
//! be `-`. Paths are relative to the manifest's directory. Lines starting
//! with `#` are comments.

pub mod synthetic;

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::types::{ForegroundMask, Image, Keypoint, KeypointSet, LabelGrid, Tensor3, IGNORE_LABEL};

pub const MANIFEST_NAME: &str = "manifest.tsv";
pub const LABEL_IGNORE_BYTE: u8 = 255;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidValue(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub image: PathBuf,
    pub fg: PathBuf,
    pub keypoints: Option<PathBuf>,
    pub parts: Option<PathBuf>,
    pub class: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

fn optional(field: &str) -> Option<&str> {
    (field != "-" && !field.is_empty()).then_some(field)
}

impl DatasetManifest {
    pub fn parse(text: &str, root: &Path, source: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        let mut ids = HashSet::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if !(4..=7).contains(&fields.len()) {
                return Err(Error::format(source, format!("line {}: expected 4 to 7 tab-separated fields", lineno + 1)));
            }
            let get = |i: usize| fields.get(i).copied().and_then(optional);
            let id = fields[0].to_string();
            if !ids.insert(id.clone()) {
                return Err(Error::format(source, format!("line {}: duplicate sample id `{id}`", lineno + 1)));
            }
            let split = fields[1].parse().map_err(|e: Error| Error::format(source, format!("line {}: {e}", lineno + 1)))?;
            entries.push(ManifestEntry {
                id,
                split,
                image: PathBuf::from(fields[2]),
                fg: PathBuf::from(fields[3]),
                keypoints: get(4).map(PathBuf::from),
                parts: get(5).map(PathBuf::from),
                class: get(6).map(str::to_string),
            });
        }
        Ok(Self { root: root.to_path_buf(), entries })
    }

    /// Reads a manifest and checks that every referenced file exists.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let manifest = Self::parse(&text, &root, path)?;
        for e in &manifest.entries {
            for file in [Some(&e.image), Some(&e.fg), e.keypoints.as_ref(), e.parts.as_ref()].into_iter().flatten() {
                let full = manifest.root.join(file);
                if !full.is_file() {
                    return Err(Error::io(
                        &full,
                        std::io::Error::new(std::io::ErrorKind::NotFound, format!("referenced by sample `{}`", e.id)),
                    ));
                }
            }
        }
        Ok(manifest)
    }

    pub fn render(&self) -> String {
        let mut out = String::from("# id\tsplit\timage\tfg\tkeypoints\tparts\tclass\n");
        let path = |p: &Option<PathBuf>| p.as_ref().map_or("-".to_string(), |p| p.display().to_string());
        for e in &self.entries {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                e.id,
                e.split,
                e.image.display(),
                e.fg.display(),
                path(&e.keypoints),
                path(&e.parts),
                e.class.as_deref().unwrap_or("-")
            ));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.render()).map_err(|e| Error::io(path, e))
    }

    pub fn count(&self, split: Split) -> usize {
        self.entries.iter().filter(|e| e.split == split).count()
    }

    pub fn has_keypoints(&self, split: Split) -> bool {
        self.entries.iter().filter(|e| e.split == split).all(|e| e.keypoints.is_some())
    }
}

/// One decoded sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub class: Option<String>,
    pub image: Image,
    pub fg: ForegroundMask,
    pub keypoints: Option<KeypointSet>,
    pub parts: Option<LabelGrid>,
}

fn named<T>(id: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Format { path, message } => Error::Format { path, message: format!("sample `{id}`: {message}") },
        Error::Shape(m) => Error::Shape(format!("sample `{id}`: {m}")),
        other => other,
    })
}

pub fn load_sample(manifest: &DatasetManifest, entry: &ManifestEntry) -> Result<Sample> {
    let root = &manifest.root;
    let id = entry.id.as_str();
    let image = named(id, read_image(&root.join(&entry.image)))?;
    let fg = named(id, read_mask(&root.join(&entry.fg)))?;
    named(id, fg.check_shape(image.height(), image.width()))?;
    let keypoints = entry.keypoints.as_ref().map(|p| named(id, read_keypoints(&root.join(p)))).transpose()?;
    let parts = entry.parts.as_ref().map(|p| named(id, read_labels(&root.join(p)))).transpose()?;
    if let Some(l) = &parts {
        if (l.height(), l.width()) != (image.height(), image.width()) {
            return Err(Error::Shape(format!("sample `{id}`: part labels do not match the image size")));
        }
    }
    Ok(Sample { id: entry.id.clone(), class: entry.class.clone(), image, fg, keypoints, parts })
}

/// Samples of one split in manifest order, optionally restricted to a class.
pub fn load(manifest: &DatasetManifest, split: Split, class: Option<&str>) -> Result<Vec<Sample>> {
    manifest
        .entries
        .iter()
        .filter(|e| e.split == split && class.is_none_or(|c| e.class.as_deref() == Some(c)))
        .map(|e| load_sample(manifest, e))
        .collect()
}

pub fn shuffled(mut samples: Vec<Sample>, seed: u64) -> Vec<Sample> {
    samples.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    samples
}

/// Replaces each sample's foreground with `<dir>/<id>.png`, binarised at 0.5.
pub fn load_saliency_masks(dir: &Path, samples: &mut [Sample]) -> Result<()> {
    for s in samples.iter_mut() {
        let path = dir.join(format!("{}.png", s.id));
        let mask = read_mask(&path)?;
        if (mask.height(), mask.width()) != (s.image.height(), s.image.width()) {
            return Err(Error::Shape(format!(
                "saliency mask {} is {}x{}, image `{}` is {}x{}",
                path.display(),
                mask.height(),
                mask.width(),
                s.id,
                s.image.height(),
                s.image.width()
            )));
        }
        s.fg = mask;
    }
    Ok(())
}

pub fn write_image(path: &Path, image: &Image) -> Result<()> {
    let t = image.tensor();
    let buf: RgbImage = ImageBuffer::from_fn(t.width() as u32, t.height() as u32, |x, y| {
        let q = |c: usize| (t.at(c, y as usize, x as usize) * 255.0).round() as u8;
        Rgb([q(0), q(1), q(2)])
    });
    buf.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

pub fn read_image(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let t = Tensor3::from_fn(3, h, w, |c, y, x| img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0);
    Image::new(t).map_err(|e| Error::format(path, e.to_string()))
}

fn write_gray(path: &Path, height: usize, width: usize, value: impl Fn(usize) -> u8) -> Result<()> {
    let buf: GrayImage = ImageBuffer::from_fn(width as u32, height as u32, |x, y| Luma([value(y as usize * width + x as usize)]));
    buf.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

fn read_gray(path: &Path) -> Result<GrayImage> {
    Ok(image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?.to_luma8())
}

/// 0 outside, 255 inside.
pub fn write_mask(path: &Path, mask: &ForegroundMask) -> Result<()> {
    write_gray(path, mask.height(), mask.width(), |u| if mask.data()[u] { 255 } else { 0 })
}

/// Grayscale mask binarised at half intensity.
pub fn read_mask(path: &Path) -> Result<ForegroundMask> {
    let g = read_gray(path)?;
    let (w, h) = (g.width() as usize, g.height() as usize);
    ForegroundMask::new(h, w, g.pixels().map(|p| p[0] as f64 / 255.0 >= 0.5).collect())
}

/// Pixel value = label, 255 = ignore.
pub fn write_labels(path: &Path, labels: &LabelGrid) -> Result<()> {
    if let Some(&bad) = labels.data().iter().find(|&&l| l >= LABEL_IGNORE_BYTE as i32) {
        return Err(Error::InvalidValue(format!("label {bad} does not fit the 8-bit label format")));
    }
    write_gray(path, labels.height(), labels.width(), |u| {
        let l = labels.data()[u];
        if l == IGNORE_LABEL { LABEL_IGNORE_BYTE } else { l as u8 }
    })
}

pub fn read_labels(path: &Path) -> Result<LabelGrid> {
    let g = read_gray(path)?;
    let data = g.pixels().map(|p| if p[0] == LABEL_IGNORE_BYTE { IGNORE_LABEL } else { p[0] as i32 }).collect();
    LabelGrid::new(g.height() as usize, g.width() as usize, data)
}

/// One `x y visible` row per keypoint.
pub fn write_keypoints(path: &Path, kps: &KeypointSet) -> Result<()> {
    let text: String = kps.iter().map(|k| format!("{} {} {}\n", k.x, k.y, u8::from(k.visible))).collect();
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_keypoints(path: &Path) -> Result<KeypointSet> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        let bad = || Error::format(path, format!("line {}: expected `x y visible`", i + 1));
        if f.len() != 3 {
            return Err(bad());
        }
        let x: f64 = f[0].parse().map_err(|_| bad())?;
        let y: f64 = f[1].parse().map_err(|_| bad())?;
        let visible = match f[2] {
            "1" => true,
            "0" => false,
            _ => return Err(bad()),
        };
        points.push(Keypoint { x, y, visible });
    }
    KeypointSet::new(points).map_err(|e| Error::format(path, e.to_string()))
}
