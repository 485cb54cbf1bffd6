//! Clustering agreement (NMI, ARI and their foreground variants) and the
//! landmark-regression protocol with its degenerate baselines.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::types::{ForegroundMask, KeypointSet, LabelGrid, SoftMask, SparseLabels, IGNORE_LABEL};

/// Counts of (predicted, ground-truth) label pairs.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ContingencyTable {
    cells: BTreeMap<(i32, i32), u64>,
}

/// Either kind of labelling accepted by [`contingency`].
#[derive(Debug, Clone, Copy)]
pub enum Labels<'a> {
    Dense(&'a LabelGrid),
    Sparse(&'a SparseLabels),
}

impl Labels<'_> {
    fn size(&self) -> (usize, usize) {
        match self {
            Labels::Dense(g) => (g.height(), g.width()),
            Labels::Sparse(s) => (s.height(), s.width()),
        }
    }

    fn dense(&self) -> LabelGrid {
        match self {
            Labels::Dense(g) => (*g).clone(),
            Labels::Sparse(s) => {
                let mut g = LabelGrid::filled(s.height(), s.width(), IGNORE_LABEL);
                for &((y, x), l) in s.points() {
                    g.set(y, x, l as i32);
                }
                g
            }
        }
    }
}

impl<'a> From<&'a LabelGrid> for Labels<'a> {
    fn from(g: &'a LabelGrid) -> Self {
        Labels::Dense(g)
    }
}

impl<'a> From<&'a SparseLabels> for Labels<'a> {
    fn from(s: &'a SparseLabels) -> Self {
        Labels::Sparse(s)
    }
}

impl ContingencyTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, pred: i32, gt: i32, count: u64) {
        if count > 0 {
            *self.cells.entry((pred, gt)).or_insert(0) += count;
        }
    }

    pub fn merge(&mut self, other: &ContingencyTable) {
        for (&(p, g), &n) in &other.cells {
            self.add(p, g, n);
        }
    }

    pub fn total(&self) -> u64 {
        self.cells.values().sum()
    }

    pub fn get(&self, pred: i32, gt: i32) -> u64 {
        self.cells.get(&(pred, gt)).copied().unwrap_or(0)
    }

    pub fn pred_labels(&self) -> Vec<i32> {
        let mut v: Vec<i32> = self.cells.keys().map(|k| k.0).collect();
        v.dedup();
        v
    }

    pub fn gt_labels(&self) -> Vec<i32> {
        let mut v: Vec<i32> = self.cells.keys().map(|k| k.1).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    /// Dense matrix with rows = predicted labels, columns = ground-truth
    /// labels, both in ascending order.
    pub fn matrix(&self) -> Vec<Vec<u64>> {
        let (rows, cols) = (self.pred_labels(), self.gt_labels());
        rows.iter().map(|&p| cols.iter().map(|&g| self.get(p, g)).collect()).collect()
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.matrix().iter().map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<u64> {
        let m = self.matrix();
        (0..self.gt_labels().len()).map(|j| m.iter().map(|r| r[j]).sum()).collect()
    }
}

/// Pairs every pixel labelled on both sides (and inside `restrict` when
/// given).
pub fn contingency<'a, 'b>(
    pred: impl Into<Labels<'a>>,
    gt: impl Into<Labels<'b>>,
    restrict: Option<&ForegroundMask>,
) -> Result<ContingencyTable> {
    let (pred, gt) = (pred.into(), gt.into());
    if pred.size() != gt.size() {
        return Err(Error::Shape(format!("prediction is {:?}, ground truth is {:?}", pred.size(), gt.size())));
    }
    if let Some(r) = restrict {
        r.check_shape(pred.size().0, pred.size().1)?;
    }
    let mut table = ContingencyTable::new();
    let count_pair = |table: &mut ContingencyTable, u: usize, p: i32, g: i32| {
        if p != IGNORE_LABEL && g != IGNORE_LABEL && restrict.is_none_or(|r| r.data()[u]) {
            table.add(p, g, 1);
        }
    };
    match (pred, gt) {
        (Labels::Dense(p), Labels::Sparse(s)) | (Labels::Sparse(s), Labels::Dense(p)) => {
            let pred_is_dense = matches!(pred, Labels::Dense(_));
            for &((y, x), l) in s.points() {
                let u = y * s.width() + x;
                let (a, b) = if pred_is_dense { (p.get(y, x), l as i32) } else { (l as i32, p.get(y, x)) };
                count_pair(&mut table, u, a, b);
            }
        }
        _ => {
            let (p, g) = (pred.dense(), gt.dense());
            for (u, (&a, &b)) in p.data().iter().zip(g.data()).enumerate() {
                count_pair(&mut table, u, a, b);
            }
        }
    }
    if table.total() == 0 {
        return Err(Error::NoScoredPixels);
    }
    Ok(table)
}

fn entropy(counts: &[u64], total: f64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.ln()
        })
        .sum()
}

/// Mutual information over the arithmetic mean of the two entropies; 0
/// when either side has zero entropy.
pub fn nmi(table: &ContingencyTable) -> f64 {
    let total = table.total() as f64;
    if total == 0.0 {
        return 0.0;
    }
    let (rows, cols) = (table.row_sums(), table.col_sums());
    let (hp, hg) = (entropy(&rows, total), entropy(&cols, total));
    if hp == 0.0 || hg == 0.0 {
        return 0.0;
    }
    let (pl, gl) = (table.pred_labels(), table.gt_labels());
    let mut mi = 0.0;
    for (i, &p) in pl.iter().enumerate() {
        for (j, &g) in gl.iter().enumerate() {
            let n = table.get(p, g);
            if n > 0 {
                let nij = n as f64;
                mi += nij / total * (nij * total / (rows[i] as f64 * cols[j] as f64)).ln();
            }
        }
    }
    (mi / ((hp + hg) / 2.0)).clamp(0.0, 1.0)
}

fn comb2(n: u64) -> f64 {
    let n = n as f64;
    n * (n - 1.0) / 2.0
}

/// Adjusted Rand index; 1 when the maximum equals the expected index.
pub fn ari(table: &ContingencyTable) -> f64 {
    let index: f64 = table.cells.values().map(|&n| comb2(n)).sum();
    let a: f64 = table.row_sums().into_iter().map(comb2).sum();
    let b: f64 = table.col_sums().into_iter().map(comb2).sum();
    let all = comb2(table.total());
    let expected = if all > 0.0 { a * b / all } else { 0.0 };
    let max = (a + b) / 2.0;
    if max == expected {
        return 1.0;
    }
    (index - expected) / (max - expected)
}

/// Soft-mask centroid of every part over `fg`, as `(x₀, y₀, x₁, y₁, …)` in
/// normalised coordinates; an empty part falls back to the image midpoint.
pub fn mask_landmarks(mask: &SoftMask, fg: &ForegroundMask) -> Result<Vec<f64>> {
    fg.check_shape(mask.height(), mask.width())?;
    let (h, w) = (mask.height(), mask.width());
    let mut out = Vec::with_capacity(2 * mask.parts());
    for k in 0..mask.parts() {
        let ch = mask.tensor().channel(k);
        let (mut sx, mut sy, mut m) = (0.0, 0.0, 0.0);
        for y in 0..h {
            for x in 0..w {
                let u = y * w + x;
                if fg.data()[u] {
                    sx += ch[u] * (x as f64 + 0.5);
                    sy += ch[u] * (y as f64 + 0.5);
                    m += ch[u];
                }
            }
        }
        if m > crate::types::EPS_MASS {
            out.push(sx / m / w as f64);
            out.push(sy / m / h as f64);
        } else {
            out.extend([0.5, 0.5]);
        }
    }
    Ok(out)
}

/// Linear map from landmark vectors to keypoints, one ordinary least-squares
/// problem per keypoint coordinate, fitted only on images where that
/// keypoint is visible.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionFit {
    /// `(inputs + 1) × (2·keypoints)`; the last row is the intercept.
    pub weights: DMatrix<f64>,
    pub inputs: usize,
    pub keypoints: usize,
    /// Name of the split the fit was computed on.
    pub split: String,
}

impl RegressionFit {
    pub fn predict(&self, landmarks: &[f64]) -> Vec<[f64; 2]> {
        assert_eq!(landmarks.len(), self.inputs, "landmark vector length");
        (0..self.keypoints)
            .map(|j| {
                let coord = |c: usize| {
                    let col = 2 * j + c;
                    landmarks.iter().enumerate().map(|(i, v)| v * self.weights[(i, col)]).sum::<f64>()
                        + self.weights[(self.inputs, col)]
                };
                [coord(0), coord(1)]
            })
            .collect()
    }
}

/// Fits on `(landmarks, keypoints)` pairs; `None` landmarks are dropped.
pub fn fit_keypoint_regression(
    landmarks: &[Option<Vec<f64>>],
    gt: &[KeypointSet],
    split: &str,
) -> Result<RegressionFit> {
    if landmarks.len() != gt.len() {
        return Err(Error::Shape(format!("{} landmark vectors for {} keypoint sets", landmarks.len(), gt.len())));
    }
    let rows: Vec<(&Vec<f64>, &KeypointSet)> =
        landmarks.iter().zip(gt).filter_map(|(l, g)| l.as_ref().map(|l| (l, g))).collect();
    let first = rows.first().ok_or_else(|| Error::InvalidValue("no images to fit the regression on".into()))?;
    let (inputs, keypoints) = (first.0.len(), first.1.len());
    if rows.iter().any(|(l, g)| l.len() != inputs || g.len() != keypoints) {
        return Err(Error::Shape("landmark or keypoint counts differ between images".into()));
    }
    if rows.len() < inputs + 1 {
        return Err(Error::InvalidValue(format!(
            "regression with {inputs} inputs needs at least {} training images, got {}",
            inputs + 1,
            rows.len()
        )));
    }
    let mut weights = DMatrix::zeros(inputs + 1, 2 * keypoints);
    for j in 0..keypoints {
        let used: Vec<&(&Vec<f64>, &KeypointSet)> = rows.iter().filter(|(_, g)| g.0[j].visible).collect();
        if used.is_empty() {
            log::warn!("keypoint {j} is never visible in the training split; predicting 0");
            continue;
        }
        let x = DMatrix::from_fn(used.len(), inputs + 1, |r, c| if c < inputs { used[r].0[c] } else { 1.0 });
        let y = DMatrix::from_fn(used.len(), 2, |r, c| if c == 0 { used[r].1 .0[j].x } else { used[r].1 .0[j].y });
        let svd = x.svd(true, true);
        let eps = 1e-12 * svd.singular_values.max().max(1.0);
        if svd.rank(eps) < inputs + 1 {
            log::warn!("rank-deficient regression design for keypoint {j}; using the least-norm solution");
        }
        let sol = svd.solve(&y, eps).map_err(|e| Error::InvalidValue(format!("least squares failed: {e}")))?;
        for r in 0..=inputs {
            weights[(r, 2 * j)] = sol[(r, 0)];
            weights[(r, 2 * j + 1)] = sol[(r, 1)];
        }
    }
    Ok(RegressionFit { weights, inputs, keypoints, split: split.to_string() })
}

/// Mean distance between predicted and visible ground-truth keypoints, in
/// percent of the image width. `sizes` holds each image's `(height, width)`.
pub fn keypoint_error(
    fit: &RegressionFit,
    landmarks: &[Option<Vec<f64>>],
    gt: &[KeypointSet],
    sizes: &[(usize, usize)],
) -> Result<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for ((l, g), &(h, w)) in landmarks.iter().zip(gt).zip(sizes) {
        let Some(l) = l else { continue };
        for (p, k) in fit.predict(l).iter().zip(g.iter()) {
            if k.visible {
                let dx = (p[0] - k.x) * w as f64;
                let dy = (p[1] - k.y) * h as f64;
                sum += (dx * dx + dy * dy).sqrt() / w as f64 * 100.0;
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::InvalidValue("no visible keypoints to score".into()));
    }
    Ok(sum / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LandmarkBaseline {
    ImageMidpoint,
    KeypointCenter,
    SingleKeypoint(usize),
}

/// Landmark vectors for one of the degenerate baselines. `None` marks an
/// image that has to be dropped.
pub fn baseline_landmarks(kind: LandmarkBaseline, gt: &[KeypointSet]) -> Vec<Option<Vec<f64>>> {
    gt.iter()
        .enumerate()
        .map(|(i, kps)| match kind {
            LandmarkBaseline::ImageMidpoint => Some(vec![0.5, 0.5]),
            LandmarkBaseline::KeypointCenter => {
                let vis: Vec<_> = kps.iter().filter(|k| k.visible).collect();
                if vis.is_empty() {
                    log::warn!("image {i} has no visible keypoints; dropped");
                    return None;
                }
                let n = vis.len() as f64;
                Some(vec![vis.iter().map(|k| k.x).sum::<f64>() / n, vis.iter().map(|k| k.y).sum::<f64>() / n])
            }
            LandmarkBaseline::SingleKeypoint(j) => match kps.get(j) {
                Some(k) if k.visible => Some(vec![k.x, k.y]),
                _ => {
                    log::warn!("keypoint {j} not visible in image {i}; dropped");
                    None
                }
            },
        })
        .collect()
}

/// Prediction and ground truth for one image in the segmentation metrics.
/// Pixels outside `fg` count as background in the full-image scores.
pub struct ScoredImage<'a> {
    pub pred: &'a LabelGrid,
    pub gt: &'a LabelGrid,
    pub fg: &'a ForegroundMask,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentationScores {
    pub nmi: f64,
    pub ari: f64,
    pub fg_nmi: f64,
    pub fg_ari: f64,
    /// Pixels counted by the foreground variants.
    pub fg_pixels: u64,
}

/// Dataset-level scores from one contingency table accumulated over all
/// images.
pub fn segmentation_scores(images: &[ScoredImage<'_>]) -> Result<SegmentationScores> {
    let (mut full, mut fg) = (ContingencyTable::new(), ContingencyTable::new());
    for im in images {
        full.merge(&contingency(im.pred, im.gt, None)?);
        match contingency(im.pred, im.gt, Some(im.fg)) {
            Ok(t) => fg.merge(&t),
            Err(Error::NoScoredPixels) => {}
            Err(e) => return Err(e),
        }
    }
    if fg.total() == 0 {
        return Err(Error::NoScoredPixels);
    }
    Ok(SegmentationScores { nmi: nmi(&full), ari: ari(&full), fg_nmi: nmi(&fg), fg_ari: ari(&fg), fg_pixels: fg.total() })
}

/// Evaluation report; absent values are omitted from the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricReport {
    pub nmi: Option<f64>,
    pub ari: Option<f64>,
    pub fg_nmi: Option<f64>,
    pub fg_ari: Option<f64>,
    pub kp_error: Option<f64>,
    pub per_class: Vec<(String, MetricReport)>,
}

impl MetricReport {
    pub fn with_segmentation(mut self, s: &SegmentationScores) -> Self {
        self.nmi = Some(s.nmi);
        self.ari = Some(s.ari);
        self.fg_nmi = Some(s.fg_nmi);
        self.fg_ari = Some(s.fg_ari);
        self
    }

    fn write_keys(&self, out: &mut String) {
        for (key, v) in [
            ("nmi", self.nmi),
            ("ari", self.ari),
            ("fg_nmi", self.fg_nmi),
            ("fg_ari", self.fg_ari),
            ("kp_error", self.kp_error),
        ] {
            if let Some(v) = v {
                let _ = writeln!(out, "{key} = {v:?}");
            }
        }
    }

    /// `key = value` lines; per-class results follow as `[class.<name>]`
    /// sections.
    pub fn render(&self) -> String {
        let mut out = String::new();
        self.write_keys(&mut out);
        for (name, r) in &self.per_class {
            let _ = writeln!(out, "\n[class.\"{}\"]", name.replace('"', "\\\""));
            r.write_keys(&mut out);
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.render()).map_err(|e| Error::io(path, e))
    }
}
