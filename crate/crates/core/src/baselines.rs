//! K-means over perceptual features of foreground pixels, with centroids
//! shared across the whole collection.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::segmenter::resample_foreground;
use crate::types::{FeatureMap, ForegroundMask, LabelGrid, IGNORE_LABEL};

pub const MAX_ITERATIONS: usize = 300;
pub const MAX_FIT_SAMPLES: usize = 100_000;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    /// `K × d`, row-major.
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index and squared distance of the nearest centroid; ties go to the
/// smaller index.
pub fn nearest(centroids: &[Vec<f64>], v: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.iter().enumerate() {
        let d = sq_dist(c, v);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

fn plus_plus_seeds(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut dist: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut pick = dist.iter().rposition(|&d| d > 0.0).expect("positive total");
            for (i, &d) in dist.iter().enumerate() {
                if d > 0.0 && r < d {
                    pick = i;
                    break;
                }
                r -= d;
            }
            pick
        } else {
            rng.random_range(0..points.len())
        };
        let c = points[pick].clone();
        for (d, p) in dist.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

/// k-means++ seeding followed by Lloyd iterations until the assignment is
/// stable or [`MAX_ITERATIONS`] is reached.
pub fn kmeans_fit(points: &[Vec<f64>], k: usize, seed: u64) -> Result<KMeans> {
    if k == 0 {
        return Err(Error::InvalidValue("K must be at least 1".into()));
    }
    if points.len() < k {
        return Err(Error::InvalidValue(format!("{} feature vectors for K={k}", points.len())));
    }
    let d = points[0].len();
    if points.iter().any(|p| p.len() != d) {
        return Err(Error::Shape("feature vectors have different lengths".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_seeds(points, k, &mut rng);
    let mut assign = vec![usize::MAX; points.len()];
    let mut prev_inertia = f64::INFINITY;
    let mut iterations = 0;
    loop {
        let mut changed = false;
        let mut dists = vec![0.0; points.len()];
        for (i, p) in points.iter().enumerate() {
            let (c, dist) = nearest(&centroids, p);
            changed |= assign[i] != c;
            assign[i] = c;
            dists[i] = dist;
        }
        let inertia: f64 = dists.iter().sum();
        assert!(
            inertia <= prev_inertia * (1.0 + 1e-12) + 1e-12,
            "k-means inertia increased from {prev_inertia} to {inertia}"
        );
        prev_inertia = inertia;
        if !changed || iterations == MAX_ITERATIONS {
            return Ok(KMeans { centroids, inertia, iterations });
        }
        iterations += 1;

        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (p, &c) in points.iter().zip(&assign) {
            counts[c] += 1;
            sums[c].iter_mut().zip(p).for_each(|(s, v)| *s += v);
        }
        let mut taken = vec![false; points.len()];
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
                continue;
            }
            // Empty cluster: move it onto the point worst served by its centroid.
            let far = (0..points.len())
                .filter(|&i| !taken[i])
                .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                .expect("at least K points");
            log::debug!("k-means cluster {c} empty; reseeded from point {far}");
            taken[far] = true;
            dists[far] = 0.0;
            centroids[c] = points[far].clone();
            counts[assign[far]] -= 1;
            assign[far] = c;
            counts[c] = 1;
        }
        // Clusters that lost a point to a reseed need their mean refreshed.
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (p, &c) in points.iter().zip(&assign) {
            counts[c] += 1;
            sums[c].iter_mut().zip(p).for_each(|(s, v)| *s += v);
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
    }
}

/// Feature vectors of foreground cells, with the mask resampled to the
/// feature grid.
pub fn foreground_features(features: &FeatureMap, fg: &ForegroundMask) -> Vec<Vec<f64>> {
    let fg = resample_foreground(fg, features.height(), features.width());
    let mut out = Vec::new();
    for y in 0..features.height() {
        for x in 0..features.width() {
            if fg.contains(y, x) {
                out.push(features.vector(y, x));
            }
        }
    }
    out
}

/// Pools foreground features over all images and uniformly subsamples at
/// most `cap` of them.
pub fn fit_sample(maps: &[(FeatureMap, ForegroundMask)], cap: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut all: Vec<Vec<f64>> = maps.iter().flat_map(|(f, fg)| foreground_features(f, fg)).collect();
    if all.len() <= cap {
        return all;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut picked = index::sample(&mut rng, all.len(), cap).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| std::mem::take(&mut all[i])).collect()
}

/// Nearest-centroid label for every foreground pixel at the mask's
/// resolution; the feature grid is upsampled by nearest neighbour and
/// background pixels are [`IGNORE_LABEL`].
pub fn kmeans_assign(centroids: &[Vec<f64>], features: &FeatureMap, fg: &ForegroundMask) -> Result<LabelGrid> {
    if let Some(c) = centroids.iter().find(|c| c.len() != features.dim()) {
        return Err(Error::Shape(format!("centroids have {} dims, features have {}", c.len(), features.dim())));
    }
    let (h, w) = (fg.height(), fg.width());
    let (fh, fw) = (features.height(), features.width());
    let cell_labels: Vec<i32> = (0..fh * fw)
        .map(|u| nearest(centroids, &features.vector(u / fw, u % fw)).0 as i32)
        .collect();
    let mut data = vec![IGNORE_LABEL; h * w];
    for y in 0..h {
        let sy = ((y * fh) / h).min(fh - 1);
        for x in 0..w {
            if fg.contains(y, x) {
                let sx = ((x * fw) / w).min(fw - 1);
                data[y * w + x] = cell_labels[sy * fw + sx];
            }
        }
    }
    LabelGrid::new(h, w, data)
}

/// The whole baseline: fit on the pooled foreground features of `maps`,
/// then label every image.
pub fn kmeans_baseline(maps: &[(FeatureMap, ForegroundMask)], k: usize, seed: u64) -> Result<(KMeans, Vec<LabelGrid>)> {
    let sample = fit_sample(maps, MAX_FIT_SAMPLES, seed);
    let model = kmeans_fit(&sample, k, seed)?;
    let labels = maps.par_iter().map(|(f, fg)| kmeans_assign(&model.centroids, f, fg)).collect::<Result<Vec<_>>>()?;
    Ok((model, labels))
}
