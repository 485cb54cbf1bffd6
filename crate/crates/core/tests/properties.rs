use partscope::baselines::kmeans_fit;
use partscope::losses::consistency::{feature_loss, visual_loss};
use partscope::losses::contrastive::{BatchDescriptors, ContrastiveOptions, TargetAssignment, contrastive_loss};
use partscope::losses::equivariance::equivariance_loss;
use partscope::metrics::{ari, contingency, nmi};
use partscope::transforms::TransformSpec;
use partscope::types::{FeatureMap, ForegroundMask, Image, LabelGrid, SoftMask, Tensor3};
use proptest::collection::vec;
use proptest::prelude::*;

fn grid(h: usize, w: usize, data: Vec<i32>) -> LabelGrid {
    LabelGrid::new(h, w, data).unwrap()
}

fn labels_pair() -> impl Strategy<Value = (usize, usize, Vec<i32>, Vec<i32>)> {
    (1usize..12, 1usize..12).prop_flat_map(|(h, w)| (Just(h), Just(w), vec(0i32..6, h * w), vec(0i32..6, h * w)))
}

fn logits(k: usize, h: usize, w: usize) -> impl Strategy<Value = Tensor3> {
    vec(-4.0f64..4.0, k * h * w).prop_map(move |d| Tensor3::from_vec(k, h, w, d).unwrap())
}

fn mask_image_fg() -> impl Strategy<Value = (SoftMask, Image, ForegroundMask)> {
    (1usize..5, 8usize..12, 8usize..12).prop_flat_map(|(k, h, w)| {
        (
            logits(k, h, w).prop_map(|t| SoftMask::from_logits(&t)),
            vec(0.0f64..1.0, 3 * h * w).prop_map(move |d| Image::new(Tensor3::from_vec(3, h, w, d).unwrap()).unwrap()),
            vec(any::<bool>(), h * w).prop_map(move |mut d| {
                d[0] = true;
                ForegroundMask::new(h, w, d).unwrap()
            }),
        )
    })
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * (1.0 + a.abs().max(b.abs()))
}

proptest! {
    #[test]
    fn nmi_and_ari_are_symmetric_and_bounded((h, w, a, b) in labels_pair()) {
        let (a, b) = (grid(h, w, a), grid(h, w, b));
        let ab = contingency(&a, &b, None).unwrap();
        let ba = contingency(&b, &a, None).unwrap();
        prop_assert!(close(nmi(&ab), nmi(&ba)));
        prop_assert!(close(ari(&ab), ari(&ba)));
        prop_assert!((0.0..=1.0).contains(&nmi(&ab)));
        prop_assert!(ari(&ab) <= 1.0 + 1e-12);
    }

    #[test]
    fn metrics_ignore_label_names((h, w, a, b) in labels_pair(), shift in 1i32..50) {
        let (ga, gb) = (grid(h, w, a.clone()), grid(h, w, b));
        let renamed = grid(h, w, a.iter().map(|&l| (5 - l) * 7 + shift).collect());
        let t0 = contingency(&ga, &gb, None).unwrap();
        let t1 = contingency(&renamed, &gb, None).unwrap();
        prop_assert!(close(nmi(&t0), nmi(&t1)));
        prop_assert!(close(ari(&t0), ari(&t1)));
    }

    #[test]
    fn full_foreground_restriction_is_a_no_op((h, w, a, b) in labels_pair()) {
        let (a, b) = (grid(h, w, a), grid(h, w, b));
        let full = contingency(&a, &b, Some(&ForegroundMask::full(h, w))).unwrap();
        prop_assert_eq!(full, contingency(&a, &b, None).unwrap());
    }

    #[test]
    fn identical_partitions_score_one((h, w, a, _b) in labels_pair()) {
        let a = grid(h, w, a);
        let t = contingency(&a, &a, None).unwrap();
        prop_assert_eq!(ari(&t), 1.0);
        if a.data().iter().any(|&l| l != a.data()[0]) {
            prop_assert!(close(nmi(&t), 1.0));
        }
    }

    #[test]
    fn soft_masks_are_distributions(t in (1usize..5, 1usize..6, 1usize..6).prop_flat_map(|(k, h, w)| logits(k, h, w))) {
        let m = SoftMask::from_logits(&t);
        let (k, h, w) = t.shape();
        for u in 0..h * w {
            let s: f64 = (0..k).map(|c| m.tensor().data()[c * h * w + u]).sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn consistency_losses_are_nonnegative_and_relabel_invariant((mask, image, fg) in mask_image_fg()) {
        let lv = visual_loss(&image, &mask, &fg).unwrap();
        prop_assert!(lv >= 0.0);
        let perm: Vec<usize> = (0..mask.parts()).rev().collect();
        let lp = visual_loss(&image, &mask.permute_parts(&perm), &fg).unwrap();
        prop_assert!(close(lv, lp));
        let lf = feature_loss(&FeatureMap::from_image(&image), &mask, &fg).unwrap();
        prop_assert_eq!(lf.to_bits(), lv.to_bits());
    }

    #[test]
    fn equivariance_loss_is_nonnegative_and_zero_on_equal_masks(
        (a, b) in (1usize..4, 3usize..8, 3usize..8).prop_flat_map(|(k, h, w)| (logits(k, h, w), logits(k, h, w))),
        rotation in -30.0f64..30.0,
        scale in 0.8f64..1.2,
    ) {
        let (a, b) = (SoftMask::from_logits(&a), SoftMask::from_logits(&b));
        let t = TransformSpec::geometric(rotation, scale, [0.0, 0.0]).unwrap();
        prop_assert!(equivariance_loss(&a, &b, &t, None).unwrap().value >= 0.0);
        prop_assert_eq!(equivariance_loss(&a, &a, &TransformSpec::identity(), None).unwrap().value, 0.0);
    }

    #[test]
    fn contrastive_loss_is_nonnegative_and_scale_invariant(
        rows in (2usize..4, 1usize..4).prop_flat_map(|(n, k)| vec(vec(vec(-2.0f64..2.0, 3), k), n)),
        scale in 0.1f64..10.0,
    ) {
        let opt: Vec<Vec<Option<Vec<f64>>>> = rows.iter().map(|r| r.iter().cloned().map(Some).collect()).collect();
        prop_assume!(rows.iter().flatten().all(|v| v.iter().map(|x| x * x).sum::<f64>() > 1e-3));
        let batch = BatchDescriptors::from_parts(3, &opt).unwrap();
        let n = rows.len();
        let k = rows[0].len();
        let targets = cyclic(n, k);
        let options = ContrastiveOptions::default();
        let base = contrastive_loss(&batch, &targets, &options).unwrap().value;
        prop_assert!(base >= 0.0);
        let scaled = contrastive_loss(&batch.scaled(scale), &targets, &options).unwrap().value;
        prop_assert!((base - scaled).abs() < 1e-9 * (1.0 + base));
    }

    #[test]
    fn kmeans_centroids_are_cluster_means(
        points in vec(vec(-5.0f64..5.0, 2), 4..40),
        k in 1usize..4,
        seed in 0u64..100,
    ) {
        let model = kmeans_fit(&points, k, seed).unwrap();
        prop_assert_eq!(&model, &kmeans_fit(&points, k, seed).unwrap());
        let nearest = |p: &[f64]| {
            (0..model.centroids.len())
                .min_by(|&i, &j| dist(p, &model.centroids[i]).total_cmp(&dist(p, &model.centroids[j])))
                .unwrap()
        };
        let inertia: f64 = points.iter().map(|p| dist(p, &model.centroids[nearest(p)])).sum();
        prop_assert!((inertia - model.inertia).abs() <= 1e-9 * (1.0 + inertia));
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Image `n` targets image `n + 1` for every part.
fn cyclic(n: usize, k: usize) -> TargetAssignment {
    TargetAssignment { images: n, parts: k, targets: (0..n).flat_map(|i| std::iter::repeat_n(Some((i + 1) % n), k)).collect() }
}
