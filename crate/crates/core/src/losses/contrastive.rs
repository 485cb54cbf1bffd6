//! Cross-image contrastive loss over part descriptors, and the plain L2
//! variant used as an ablation.

use crate::error::{Error, Result};

/// `z_k^{(n)}` for every image `n` and part `k`, with a validity flag for
/// parts that were empty in their image.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchDescriptors {
    images: usize,
    parts: usize,
    dim: usize,
    vectors: Vec<f64>,
    valid: Vec<bool>,
}

impl BatchDescriptors {
    pub fn new(images: usize, parts: usize, dim: usize) -> Self {
        Self { images, parts, dim, vectors: vec![0.0; images * parts * dim], valid: vec![false; images * parts] }
    }

    /// Builds a batch from `[image][part] -> Option<vector>`.
    pub fn from_parts(dim: usize, rows: &[Vec<Option<Vec<f64>>>]) -> Result<Self> {
        let parts = rows.first().map_or(0, Vec::len);
        let mut b = Self::new(rows.len(), parts, dim);
        for (n, row) in rows.iter().enumerate() {
            if row.len() != parts {
                return Err(Error::Shape(format!("image {n} has {} parts, expected {parts}", row.len())));
            }
            for (k, v) in row.iter().enumerate() {
                if let Some(v) = v {
                    b.set(n, k, v)?;
                }
            }
        }
        Ok(b)
    }

    pub fn images(&self) -> usize {
        self.images
    }

    pub fn parts(&self) -> usize {
        self.parts
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn set(&mut self, n: usize, k: usize, v: &[f64]) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::Shape(format!("descriptor has {} dims, expected {}", v.len(), self.dim)));
        }
        if !v.iter().all(|x| x.is_finite()) {
            return Err(Error::InvalidValue("descriptor is not finite".into()));
        }
        let i = n * self.parts + k;
        self.vectors[i * self.dim..(i + 1) * self.dim].copy_from_slice(v);
        self.valid[i] = true;
        Ok(())
    }

    pub fn get(&self, n: usize, k: usize) -> Option<&[f64]> {
        let i = n * self.parts + k;
        self.valid[i].then(|| &self.vectors[i * self.dim..(i + 1) * self.dim])
    }

    pub fn is_valid(&self, n: usize, k: usize) -> bool {
        self.valid[n * self.parts + k]
    }

    pub fn validity(&self) -> &[bool] {
        &self.valid
    }

    /// Same batch with every vector multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        let mut b = self.clone();
        b.vectors.iter_mut().for_each(|v| *v *= c);
        b
    }
}

/// For each `(n, k)`, the image index `i ≠ n` whose part `k` is the positive
/// target, or `None` if the anchor is skipped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TargetAssignment {
    pub images: usize,
    pub parts: usize,
    pub targets: Vec<Option<usize>>,
}

impl TargetAssignment {
    pub fn get(&self, n: usize, k: usize) -> Option<usize> {
        self.targets[n * self.parts + k]
    }

    /// With two images every target is forced to be the other one.
    pub fn pair(parts: usize) -> Self {
        let targets = (0..2).flat_map(|n| std::iter::repeat_n(Some(1 - n), parts)).collect();
        Self { images: 2, parts, targets }
    }

    pub fn skipped(&self) -> usize {
        self.targets.iter().filter(|t| t.is_none()).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContrastiveOptions {
    pub temperature: f64,
    /// ℓ2-normalise descriptors before taking dot products.
    pub normalize: bool,
    /// Also use other parts of the anchor's own image as negatives.
    pub same_image_negatives: bool,
}

impl Default for ContrastiveOptions {
    fn default() -> Self {
        Self { temperature: 0.1, normalize: true, same_image_negatives: false }
    }
}

/// Loss value and `∂L/∂z` for every raw (pre-normalisation) descriptor.
#[derive(Debug, Clone)]
pub struct DescriptorLossOutput {
    pub value: f64,
    /// Flattened `(N, K, d)`; zero for invalid entries.
    pub grad: Vec<f64>,
    /// Anchors that contributed a term.
    pub anchors: usize,
    /// Anchors dropped because they or their target were empty.
    pub skipped: usize,
}

impl DescriptorLossOutput {
    pub fn grad_of(&self, batch: &BatchDescriptors, n: usize, k: usize) -> &[f64] {
        let i = n * batch.parts + k;
        &self.grad[i * batch.dim..(i + 1) * batch.dim]
    }
}

struct Normalized {
    vectors: Vec<f64>,
    norms: Vec<f64>,
}

fn normalize(batch: &BatchDescriptors, on: bool) -> Normalized {
    let d = batch.dim;
    let mut vectors = batch.vectors.clone();
    let mut norms = vec![1.0; batch.valid.len()];
    if on {
        for (i, norm) in norms.iter_mut().enumerate() {
            if !batch.valid[i] {
                continue;
            }
            let v = &mut vectors[i * d..(i + 1) * d];
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.iter_mut().for_each(|x| *x /= n);
            *norm = n;
        }
    }
    Normalized { vectors, norms }
}

/// Maps a gradient on normalised vectors back to raw descriptors.
fn denormalize_grad(norm: &Normalized, d: usize, grad: &mut [f64], on: bool) {
    if !on {
        return;
    }
    for (i, &n) in norm.norms.iter().enumerate() {
        let v = &norm.vectors[i * d..(i + 1) * d];
        let g = &mut grad[i * d..(i + 1) * d];
        let dot: f64 = v.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
        for (gj, vj) in g.iter_mut().zip(v) {
            *gj = (*gj - vj * dot) / n;
        }
    }
}

fn check_batch(batch: &BatchDescriptors, targets: &TargetAssignment) -> Result<()> {
    if batch.images < 2 {
        return Err(Error::BatchTooSmall(batch.images));
    }
    if (targets.images, targets.parts) != (batch.images, batch.parts) {
        return Err(Error::Shape("target assignment does not match the batch".into()));
    }
    for n in 0..batch.images {
        for k in 0..batch.parts {
            if targets.get(n, k) == Some(n) {
                return Err(Error::InvalidValue(format!("anchor ({n}, {k}) targets its own image")));
            }
        }
    }
    Ok(())
}

/// `-Σ_n Σ_k log( e^{s⁺} / (e^{s⁺} + Σ_{j≠k} Σ_{i≠n} e^{z_k^{(n)}·z_j^{(i)}/τ}) )`
/// with `s⁺ = z_k^{(n)}·ẑ_k^{(n)}/τ`.
///
/// Anchors whose descriptor or target is empty are skipped; empty
/// descriptors are also left out of every negative set. The sampled targets
/// are treated as constants.
pub fn contrastive_loss(
    batch: &BatchDescriptors,
    targets: &TargetAssignment,
    options: &ContrastiveOptions,
) -> Result<DescriptorLossOutput> {
    check_batch(batch, targets)?;
    if !(options.temperature > 0.0) {
        return Err(Error::config("temperature", "must be > 0"));
    }
    let (nn, kk, d) = (batch.images, batch.parts, batch.dim);
    let tau = options.temperature;
    let norm = normalize(batch, options.normalize);
    let v = |n: usize, k: usize| &norm.vectors[(n * kk + k) * d..(n * kk + k + 1) * d];
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();

    let mut grad = vec![0.0; norm.vectors.len()];
    let mut value = 0.0;
    let (mut anchors, mut skipped) = (0, 0);
    let mut others: Vec<(usize, usize)> = Vec::new();
    let mut logits: Vec<f64> = Vec::new();
    for n in 0..nn {
        for k in 0..kk {
            let target = targets.get(n, k).filter(|&i| batch.is_valid(i, k));
            let Some(t) = target.filter(|_| batch.is_valid(n, k)) else {
                skipped += 1;
                continue;
            };
            anchors += 1;
            // Candidate 0 is the positive.
            others.clear();
            others.push((t, k));
            for i in 0..nn {
                if i == n && !options.same_image_negatives {
                    continue;
                }
                for j in 0..kk {
                    if j != k && batch.is_valid(i, j) {
                        others.push((i, j));
                    }
                }
            }
            let anchor = v(n, k);
            logits.clear();
            logits.extend(others.iter().map(|&(i, j)| dot(anchor, v(i, j)) / tau));
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            value += m + z.ln() - logits[0];
            // ∂/∂logit_c = softmax_c − [c = positive]
            for (c, &(i, j)) in others.iter().enumerate() {
                let coef = ((logits[c] - m).exp() / z - if c == 0 { 1.0 } else { 0.0 }) / tau;
                if coef == 0.0 {
                    continue;
                }
                let (ai, bi) = ((n * kk + k) * d, (i * kk + j) * d);
                for e in 0..d {
                    grad[ai + e] += coef * norm.vectors[bi + e];
                    grad[bi + e] += coef * norm.vectors[ai + e];
                }
            }
        }
    }
    denormalize_grad(&norm, d, &mut grad, options.normalize);
    Ok(DescriptorLossOutput { value, grad, anchors, skipped })
}

/// `Σ_n Σ_k ‖z_k^{(n)} − ẑ_k^{(n)}‖²` over the same anchors and targets as
/// [`contrastive_loss`]; no negatives.
pub fn l2_descriptor_loss(
    batch: &BatchDescriptors,
    targets: &TargetAssignment,
    normalize_descriptors: bool,
) -> Result<DescriptorLossOutput> {
    check_batch(batch, targets)?;
    let (nn, kk, d) = (batch.images, batch.parts, batch.dim);
    let norm = normalize(batch, normalize_descriptors);
    let mut grad = vec![0.0; norm.vectors.len()];
    let mut value = 0.0;
    let (mut anchors, mut skipped) = (0, 0);
    for n in 0..nn {
        for k in 0..kk {
            let Some(t) = targets.get(n, k).filter(|&i| batch.is_valid(i, k) && batch.is_valid(n, k)) else {
                skipped += 1;
                continue;
            };
            anchors += 1;
            let (ai, bi) = ((n * kk + k) * d, (t * kk + k) * d);
            for e in 0..d {
                let diff = norm.vectors[ai + e] - norm.vectors[bi + e];
                value += diff * diff;
                grad[ai + e] += 2.0 * diff;
                grad[bi + e] -= 2.0 * diff;
            }
        }
    }
    denormalize_grad(&norm, d, &mut grad, normalize_descriptors);
    Ok(DescriptorLossOutput { value, grad, anchors, skipped })
}
