//! Scoring predictions on a dataset split: segmentation agreement plus the
//! landmark-regression protocol, overall and per class.

use std::collections::BTreeSet;

use rayon::prelude::*;

use crate::baselines::kmeans_assign;
use crate::datasets::Sample;
use crate::error::{Error, Result};
use crate::metrics::{
    fit_keypoint_regression, keypoint_error, mask_landmarks, segmentation_scores, MetricReport, ScoredImage,
};
use crate::segmenter::Segmenter;
use crate::types::{hard_assign, FeatureMap, LabelGrid, SoftMask};

/// What a method produced for one image. Either part may be absent.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Part labels at image resolution, with background pixels labelled.
    pub labels: Option<LabelGrid>,
    /// Landmark vector fed to the keypoint regression.
    pub landmarks: Option<Vec<f64>>,
}

/// Hard labels (background = K outside the foreground) and mask centroids.
pub fn segmenter_predictions(segmenter: &Segmenter, samples: &[Sample]) -> Result<Vec<Prediction>> {
    let k = segmenter.parts() as i32;
    samples
        .par_iter()
        .map(|s| {
            let mask = segmenter.predict(&s.image);
            Ok(Prediction {
                labels: Some(hard_assign(&mask).with_background(&s.fg, k)),
                landmarks: Some(mask_landmarks(&mask, &s.fg)?),
            })
        })
        .collect()
}

/// Labels from shared K-means centroids, with centroids of the resulting
/// one-hot masks as landmarks.
pub fn kmeans_predictions(centroids: &[Vec<f64>], features: &[FeatureMap], samples: &[Sample]) -> Result<Vec<Prediction>> {
    let k = centroids.len();
    samples
        .par_iter()
        .zip(features)
        .map(|(s, f)| {
            let labels = kmeans_assign(centroids, f, &s.fg)?.with_background(&s.fg, k as i32);
            let one_hot = SoftMask::one_hot(&labels, k + 1)?;
            let mut landmarks = mask_landmarks(&one_hot, &s.fg)?;
            landmarks.truncate(2 * k);
            Ok(Prediction { labels: Some(labels), landmarks: Some(landmarks) })
        })
        .collect()
}

fn section(train: &[(&Sample, &Prediction)], test: &[(&Sample, &Prediction)]) -> Result<MetricReport> {
    let mut report = MetricReport::default();
    let scored: Vec<ScoredImage<'_>> = test
        .iter()
        .filter_map(|(s, p)| match (&p.labels, &s.parts) {
            (Some(pred), Some(gt)) => Some(ScoredImage { pred, gt, fg: &s.fg }),
            _ => None,
        })
        .collect();
    if !scored.is_empty() {
        report = report.with_segmentation(&segmentation_scores(&scored)?);
    }

    let with_kp = |set: &[(&Sample, &Prediction)]| -> Vec<(Option<Vec<f64>>, crate::types::KeypointSet, (usize, usize))> {
        set.iter()
            .filter(|(s, p)| s.keypoints.is_some() && p.landmarks.is_some())
            .map(|(s, p)| (p.landmarks.clone(), s.keypoints.clone().expect("filtered"), (s.image.height(), s.image.width())))
            .collect()
    };
    let (tr, te) = (with_kp(train), with_kp(test));
    if !tr.is_empty() && !te.is_empty() {
        let (lm, gt): (Vec<_>, Vec<_>) = tr.into_iter().map(|(l, g, _)| (l, g)).unzip();
        let fit = match fit_keypoint_regression(&lm, &gt, "train") {
            Ok(fit) => fit,
            Err(Error::InvalidValue(m)) => {
                log::warn!("keypoint error omitted: {m}");
                return Ok(report);
            }
            Err(e) => return Err(e),
        };
        let lm: Vec<_> = te.iter().map(|t| t.0.clone()).collect();
        let gt: Vec<_> = te.iter().map(|t| t.1.clone()).collect();
        let sizes: Vec<_> = te.iter().map(|t| t.2).collect();
        report.kp_error = Some(keypoint_error(&fit, &lm, &gt, &sizes)?);
    }
    Ok(report)
}

fn of_class<'a>(set: &[(&'a Sample, &'a Prediction)], class: &str) -> Vec<(&'a Sample, &'a Prediction)> {
    set.iter().filter(|(s, _)| s.class.as_deref() == Some(class)).copied().collect()
}

/// Scores `test` predictions; the keypoint regression is fitted on the
/// `train` predictions. A `None` landmark drops that image from the fit or
/// the error. Per-class sections are added when more than one class occurs.
pub fn build_report(
    train: &[Sample],
    train_pred: &[Prediction],
    test: &[Sample],
    test_pred: &[Prediction],
) -> Result<MetricReport> {
    if train.len() != train_pred.len() || test.len() != test_pred.len() {
        return Err(Error::Shape("one prediction per sample expected".into()));
    }
    let tr: Vec<(&Sample, &Prediction)> = train.iter().zip(train_pred).collect();
    let te: Vec<(&Sample, &Prediction)> = test.iter().zip(test_pred).collect();
    let mut report = section(&tr, &te)?;
    let classes: BTreeSet<&str> = test.iter().filter_map(|s| s.class.as_deref()).collect();
    if classes.len() > 1 {
        for c in classes {
            report.per_class.push((c.to_string(), section(&of_class(&tr, c), &of_class(&te, c))?));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::synthetic::{generate_samples, SyntheticSpec};
    use crate::datasets::Split;
    use crate::segmenter::SegmenterSpec;

    fn split(samples: Vec<crate::datasets::synthetic::SyntheticSample>, which: Split) -> Vec<Sample> {
        samples.into_iter().filter(|s| s.split == which).map(|s| s.sample).collect()
    }

    #[test]
    fn ground_truth_as_prediction_scores_perfectly() {
        let spec = SyntheticSpec { width: 24, height: 24, train: 12, test: 4, ..SyntheticSpec::default() };
        let all = generate_samples(&spec).unwrap();
        let (train, test) = (split(all.clone(), Split::Train), split(all, Split::Test));
        let as_pred = |s: &Sample| {
            let labels = s.parts.clone().unwrap();
            let one_hot = SoftMask::one_hot(&labels, spec.parts + 1).unwrap();
            let mut lm = mask_landmarks(&one_hot, &s.fg).unwrap();
            lm.truncate(2 * spec.parts);
            Prediction { labels: Some(labels), landmarks: Some(lm) }
        };
        let tp: Vec<_> = train.iter().map(as_pred).collect();
        let ep: Vec<_> = test.iter().map(as_pred).collect();
        let r = build_report(&train, &tp, &test, &ep).unwrap();
        assert_eq!((r.ari, r.fg_ari), (Some(1.0), Some(1.0)));
        assert!((r.nmi.unwrap() - 1.0).abs() < 1e-12 && (r.fg_nmi.unwrap() - 1.0).abs() < 1e-12);
        // Keypoints are the part centroids, so the regression is exact.
        assert!(r.kp_error.unwrap() < 1e-6, "{:?}", r.kp_error);
    }

    #[test]
    fn random_segmenter_report_is_finite() {
        let spec = SyntheticSpec { width: 16, height: 16, train: 12, test: 3, ..SyntheticSpec::default() };
        let all = generate_samples(&spec).unwrap();
        let (train, test) = (split(all.clone(), Split::Train), split(all, Split::Test));
        let mut seg = Segmenter::new(SegmenterSpec::new(4), 3).unwrap();
        seg.net.head.weight.iter_mut().enumerate().for_each(|(i, w)| *w = ((i % 5) as f64 - 2.0) * 0.3);
        let r = build_report(&train, &segmenter_predictions(&seg, &train).unwrap(), &test, &segmenter_predictions(&seg, &test).unwrap())
            .unwrap();
        for v in [r.nmi, r.ari, r.fg_nmi, r.fg_ari, r.kp_error] {
            assert!(v.unwrap().is_finite());
        }
    }

    #[test]
    fn landmark_only_predictions_omit_segmentation() {
        let spec = SyntheticSpec { width: 16, height: 16, train: 6, test: 3, ..SyntheticSpec::default() };
        let all = generate_samples(&spec).unwrap();
        let (train, test) = (split(all.clone(), Split::Train), split(all, Split::Test));
        let mid = |_: &Sample| Prediction { labels: None, landmarks: Some(vec![0.5, 0.5]) };
        let r = build_report(&train, &train.iter().map(mid).collect::<Vec<_>>(), &test, &test.iter().map(mid).collect::<Vec<_>>())
            .unwrap();
        assert_eq!((r.nmi, r.ari, r.fg_nmi, r.fg_ari), (None, None, None, None));
        assert!(r.kp_error.is_some());
    }
}
