//! Part overlays for figures.

use crate::error::{Error, Result};
use crate::types::{ForegroundMask, Image, SoftMask, Tensor3};

pub const PALETTE: [[f64; 3]; 12] = [
    [0.902, 0.098, 0.294],
    [0.235, 0.706, 0.294],
    [1.000, 0.882, 0.098],
    [0.263, 0.388, 0.847],
    [0.961, 0.510, 0.192],
    [0.569, 0.118, 0.706],
    [0.275, 0.941, 0.941],
    [0.941, 0.196, 0.902],
    [0.737, 0.965, 0.047],
    [0.980, 0.745, 0.745],
    [0.000, 0.502, 0.502],
    [0.604, 0.388, 0.141],
];

pub const BACKGROUND: [f64; 3] = [0.5, 0.5, 0.5];

pub const DEFAULT_ALPHA: f64 = 0.6;

/// Colour of part `k`; parts beyond the palette reuse it cyclically.
pub fn part_color(k: usize) -> [f64; 3] {
    PALETTE[k % PALETTE.len()]
}

/// Blends the image with the mask's expected part colour inside `fg` and
/// with [`BACKGROUND`] outside. `alpha = 1` shows the colours alone.
pub fn overlay(image: &Image, mask: &SoftMask, fg: &ForegroundMask, alpha: f64) -> Result<Image> {
    let (h, w) = (image.height(), image.width());
    if (mask.height(), mask.width()) != (h, w) || (fg.height(), fg.width()) != (h, w) {
        return Err(Error::Shape("overlay needs image, mask and foreground of one size".into()));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidValue(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    let p = h * w;
    let m = mask.tensor().data();
    let out = Tensor3::from_fn(3, h, w, |c, y, x| {
        let u = y * w + x;
        let color = if fg.data()[u] {
            (0..mask.parts()).map(|k| m[k * p + u] * part_color(k)[c]).sum::<f64>()
        } else {
            BACKGROUND[c]
        };
        ((1.0 - alpha) * image.tensor().at(c, y, x) + alpha * color).clamp(0.0, 1.0)
    });
    Image::new(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::LabelGrid;

    #[test]
    fn one_hot_overlay_shows_palette_colours() {
        let labels = LabelGrid::new(8, 8, (0..64).map(|i| (i * 5 % 6) as i32).collect()).unwrap();
        let mask = SoftMask::one_hot(&labels, 6).unwrap();
        let fg = ForegroundMask::from_fn(8, 8, |y, x| (y + x) % 3 != 0);
        let image = Image::new(Tensor3::filled(3, 8, 8, 0.9)).unwrap();
        let out = overlay(&image, &mask, &fg, 1.0).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                let want = if fg.contains(y, x) { part_color(labels.get(y, x) as usize) } else { BACKGROUND };
                assert_eq!(out.pixel(y, x), want);
            }
        }
    }

    #[test]
    fn palette_colours_are_distinct() {
        for i in 0..PALETTE.len() {
            for j in 0..i {
                assert_ne!(PALETTE[i], PALETTE[j]);
            }
        }
    }
}
