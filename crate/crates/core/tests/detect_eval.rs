mod common;

use common::{brute_nms, random_boxes, rng};
use pec_core::eval::{
    average_precision, ciou, ciou_loss, fps_benchmark, iou, mean_ap, mean_ap_threaded, nms, pr_curve, BBox, Detection,
    EvalConfig, FakeTimer, FpsConfig, GroundTruth, Summary, WallTimer,
};
use proptest::prelude::*;
use rand::Rng;

fn det(b: BBox, class_id: usize, score: f64, image_id: usize) -> Detection {
    Detection {
        bbox: b,
        class_id,
        score,
        image_id,
    }
}

fn gt(b: BBox, class_id: usize, image_id: usize) -> GroundTruth {
    GroundTruth {
        bbox: b,
        class_id,
        image_id,
    }
}

fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
    BBox::new(x1, y1, x2, y2)
}

prop_compose! {
    fn any_box()(x in -50.0f64..50.0, y in -50.0f64..50.0, w in 0.0f64..40.0, h in 0.0f64..40.0) -> BBox {
        bx(x, y, x + w, y + h)
    }
}

#[test]
fn iou_examples() {
    let a = bx(0.0, 0.0, 2.0, 2.0);
    assert_eq!(iou(&a, &a), 1.0);
    assert_eq!(iou(&a, &bx(5.0, 5.0, 6.0, 6.0)), 0.0);
    // Intersection 1, union 4 + 4 - 1.
    assert!((iou(&a, &bx(1.0, 1.0, 3.0, 3.0)) - 1.0 / 7.0).abs() < 1e-15);
    let empty = bx(1.0, 1.0, 1.0, 1.0);
    assert_eq!(iou(&empty, &empty), 0.0);
}

#[test]
fn ciou_examples() {
    let a = bx(0.0, 0.0, 4.0, 2.0);
    assert_eq!(ciou(&a, &a), 1.0);
    assert_eq!(ciou_loss(&a, &a), 0.0);
    // Concentric, same 2:1 aspect ratio.
    let b = bx(-2.0, -1.0, 6.0, 3.0);
    assert_eq!(ciou(&a, &b), iou(&a, &b));
    let degenerate = bx(3.0, 3.0, 3.0, 3.0);
    assert!(ciou(&degenerate, &a).is_finite());
    assert!(ciou(&degenerate, &degenerate).is_finite());
}

/// Complete IoU written out from its definition with `atan(w/h)`.
fn ciou_reference(p: &BBox, g: &BBox) -> f64 {
    let (pw, ph) = (p.x2 - p.x1, p.y2 - p.y1);
    let (gw, gh) = (g.x2 - g.x1, g.y2 - g.y1);
    let ix = (p.x2.min(g.x2) - p.x1.max(g.x1)).max(0.0);
    let iy = (p.y2.min(g.y2) - p.y1.max(g.y1)).max(0.0);
    let inter = ix * iy;
    let u = pw * ph + gw * gh - inter;
    let i = inter / u;
    let rho2 =
        ((p.x1 + p.x2) / 2.0 - (g.x1 + g.x2) / 2.0).powi(2) + ((p.y1 + p.y2) / 2.0 - (g.y1 + g.y2) / 2.0).powi(2);
    let c2 = (p.x2.max(g.x2) - p.x1.min(g.x1)).powi(2) + (p.y2.max(g.y2) - p.y1.min(g.y1)).powi(2);
    let v = 4.0 / std::f64::consts::PI.powi(2) * ((gw / gh).atan() - (pw / ph).atan()).powi(2);
    let alpha = v / ((1.0 - i) + v);
    i - rho2 / c2 - alpha * v
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn iou_is_symmetric_and_bounded(a in any_box(), b in any_box()) {
        let v = iou(&a, &b);
        prop_assert_eq!(v, iou(&b, &a));
        prop_assert!((0.0..=1.0).contains(&v));
        if a.area() > 0.0 {
            prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
        }
        if v >= 1.0 - 1e-15 {
            prop_assert!(a.area() > 0.0);
            prop_assert!((a.x1 - b.x1).abs() < 1e-9 && (a.y2 - b.y2).abs() < 1e-9);
        }
    }

    #[test]
    fn ciou_never_exceeds_iou(a in any_box(), b in any_box()) {
        let c = ciou(&a, &b);
        prop_assert!(c.is_finite());
        prop_assert!(c <= iou(&a, &b) + 1e-15);
        prop_assert!(ciou_loss(&a, &b) >= 0.0);
    }

    #[test]
    fn ciou_matches_reference(
        x in -20.0f64..20.0, y in -20.0f64..20.0, w in 0.5f64..30.0, h in 0.5f64..30.0,
        x2 in -20.0f64..20.0, y2 in -20.0f64..20.0, w2 in 0.5f64..30.0, h2 in 0.5f64..30.0,
    ) {
        let p = bx(x, y, x + w, y + h);
        let g = bx(x2, y2, x2 + w2, y2 + h2);
        prop_assert!((ciou(&p, &g) - ciou_reference(&p, &g)).abs() < 1e-10);
    }
}

#[test]
fn nms_keeps_the_higher_of_two_overlapping_boxes() {
    let a = det(bx(0.0, 0.0, 10.0, 10.0), 0, 0.9, 0);
    let b = det(bx(0.0, 0.0, 10.0, 9.0), 0, 0.8, 0);
    assert!(iou(&a.bbox, &b.bbox) > 0.89);
    assert_eq!(nms(&[b, a], 0.3), vec![a]);
}

#[test]
fn nms_is_class_wise_and_image_wise() {
    let a = det(bx(0.0, 0.0, 10.0, 10.0), 0, 0.9, 0);
    let b = det(bx(0.0, 0.0, 10.0, 10.0), 1, 0.8, 0);
    let c = det(bx(0.0, 0.0, 10.0, 10.0), 0, 0.7, 1);
    assert_eq!(nms(&[a, b, c], 0.3), vec![a, b, c]);
}

#[test]
fn nms_orders_ties_by_class_then_input_order() {
    let a = det(bx(0.0, 0.0, 1.0, 1.0), 2, 0.5, 0);
    let b = det(bx(5.0, 5.0, 6.0, 6.0), 1, 0.5, 0);
    let c = det(bx(9.0, 9.0, 10.0, 10.0), 1, 0.5, 0);
    assert_eq!(nms(&[a, b, c], 0.3), vec![b, c, a]);
}

#[test]
fn nms_matches_brute_force_on_random_sets() {
    let mut r = rng(2024);
    for _ in 0..1000 {
        let dets = random_boxes(&mut r, 200, 3, 2);
        let thr = r.random_range(0.05..0.9);
        assert_eq!(nms(&dets, thr), brute_nms(&dets, thr));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn nms_properties(seed in any::<u64>(), lo in 0.05f64..0.5, step in 0.0f64..0.4) {
        let dets = random_boxes(&mut rng(seed), 60, 2, 2);
        let kept = nms(&dets, lo);
        for k in &kept {
            prop_assert!(dets.contains(k));
        }
        for (i, a) in kept.iter().enumerate() {
            for b in &kept[i + 1..] {
                if a.class_id == b.class_id && a.image_id == b.image_id {
                    prop_assert!(iou(&a.bbox, &b.bbox) <= lo);
                }
            }
        }
        prop_assert!(kept.windows(2).all(|w| w[0].score >= w[1].score));
        prop_assert!(nms(&dets, lo + step).len() >= kept.len());
    }
}

/// Largest number of detections that can be paired with distinct ground
/// truths at `match_iou`, by trying every assignment.
fn max_matching(dets: &[Detection], gts: &[GroundTruth], match_iou: f64) -> usize {
    fn go(k: usize, dets: &[Detection], gts: &[GroundTruth], used: &mut Vec<bool>, thr: f64) -> usize {
        if k == dets.len() {
            return 0;
        }
        let mut best = go(k + 1, dets, gts, used, thr);
        for g in 0..gts.len() {
            if !used[g] && gts[g].image_id == dets[k].image_id && iou(&dets[k].bbox, &gts[g].bbox) >= thr {
                used[g] = true;
                best = best.max(1 + go(k + 1, dets, gts, used, thr));
                used[g] = false;
            }
        }
        best
    }
    go(0, dets, gts, &mut vec![false; gts.len()], match_iou)
}

fn fixture() -> (Vec<Detection>, Vec<GroundTruth>) {
    let gts = vec![
        gt(bx(0.0, 0.0, 10.0, 10.0), 0, 0),
        gt(bx(20.0, 0.0, 30.0, 10.0), 0, 0),
        gt(bx(40.0, 0.0, 50.0, 10.0), 0, 0),
    ];
    let dets = vec![
        // Exact hit.
        det(bx(0.0, 0.0, 10.0, 10.0), 0, 0.9, 0),
        // Duplicate of the first ground truth.
        det(bx(0.0, 0.0, 10.0, 9.0), 0, 0.8, 0),
        // Nothing there.
        det(bx(60.0, 0.0, 70.0, 10.0), 0, 0.7, 0),
        // IoU 90/110 with the second ground truth.
        det(bx(21.0, 0.0, 31.0, 10.0), 0, 0.6, 0),
        // IoU 0.4 with the third, below the match threshold.
        det(bx(40.0, 0.0, 50.0, 4.0), 0, 0.5, 0),
    ];
    (dets, gts)
}

#[test]
fn hand_fixture_curve_matches_exhaustive_thresholds() {
    let (dets, gts) = fixture();
    let curve = pr_curve(&dets, &gts, 0, 0.5);
    assert_eq!(curve.points.len(), 5);
    for (k, p) in curve.points.iter().enumerate() {
        // Keep every detection at or above this score and match optimally.
        let kept: Vec<Detection> = dets.iter().copied().filter(|d| d.score >= p.score).collect();
        let tp = max_matching(&kept, &gts, 0.5);
        assert_eq!(kept.len(), k + 1);
        assert!((p.precision - tp as f64 / kept.len() as f64).abs() < 1e-15, "rank {k}");
        assert!((p.recall - tp as f64 / 3.0).abs() < 1e-15, "rank {k}");
    }
    let tp: Vec<bool> = curve.points.iter().map(|p| p.true_positive).collect();
    assert_eq!(tp, vec![true, false, false, true, false]);
}

/// Interpolated AP by direct enumeration of the recall grid.
fn ap_reference(points: &[(f64, f64)], grid: usize) -> f64 {
    (0..grid)
        .map(|g| {
            let r = g as f64 / (grid - 1) as f64;
            points
                .iter()
                .filter(|&&(_, rec)| rec >= r - 1e-12)
                .map(|&(p, _)| p)
                .fold(0.0, f64::max)
        })
        .sum::<f64>()
        / grid as f64
}

#[test]
fn hand_fixture_ap() {
    let (dets, gts) = fixture();
    let curve = pr_curve(&dets, &gts, 0, 0.5);
    let pts: Vec<(f64, f64)> = curve.points.iter().map(|p| (p.precision, p.recall)).collect();
    let ap = average_precision(&curve, 101).ap;
    assert!((ap - ap_reference(&pts, 101)).abs() < 1e-15);
    // 34 grid points up to recall 1/3 at precision 1, 33 more up to 2/3 at 1/2.
    assert!((ap - (34.0 + 33.0 * 0.5) / 101.0).abs() < 1e-15);
}

#[test]
fn single_hit_at_half_recall_gives_51_over_101() {
    let gts = vec![gt(bx(0.0, 0.0, 5.0, 5.0), 0, 0), gt(bx(10.0, 0.0, 15.0, 5.0), 0, 0)];
    let dets = vec![det(bx(0.0, 0.0, 5.0, 5.0), 0, 0.9, 0)];
    let c = pr_curve(&dets, &gts, 0, 0.5);
    assert_eq!(average_precision(&c, 101).ap, 51.0 / 101.0);
}

#[test]
fn perfect_and_all_wrong_detectors() {
    let (_, gts) = fixture();
    let perfect: Vec<Detection> = gts.iter().map(|g| det(g.bbox, 0, 1.0, 0)).collect();
    let c = pr_curve(&perfect, &gts, 0, 0.5);
    let last = c.points.last().unwrap();
    assert_eq!((last.precision, last.recall), (1.0, 1.0));
    assert_eq!(average_precision(&c, 101).ap, 1.0);

    let wrong: Vec<Detection> = (0..4)
        .map(|k| det(bx(100.0 + k as f64, 0.0, 101.0 + k as f64, 1.0), 0, 0.5, 0))
        .collect();
    let c = pr_curve(&wrong, &gts, 0, 0.5);
    assert!(c.points.iter().all(|p| p.precision == 0.0));
    assert_eq!(average_precision(&c, 101).ap, 0.0);
}

#[test]
fn curve_edge_cases_are_flagged() {
    let none = pr_curve(&[], &[], 0, 0.5);
    assert!(none.points.is_empty());
    assert!(average_precision(&none, 101).empty);
    let d = [det(bx(0.0, 0.0, 1.0, 1.0), 0, 0.5, 0)];
    let orphan = pr_curve(&d, &[], 0, 0.5);
    assert!(orphan.recall_undefined);
    assert_eq!(orphan.points[0].recall, 0.0);
    assert_eq!(orphan.points[0].precision, 0.0);
}

#[test]
fn matching_prefers_highest_iou_ground_truth() {
    let gts = vec![gt(bx(0.0, 0.0, 10.0, 10.0), 0, 0), gt(bx(1.0, 0.0, 11.0, 10.0), 0, 0)];
    let dets = vec![
        det(bx(1.0, 0.0, 11.0, 10.0), 0, 0.9, 0),
        det(bx(0.0, 0.0, 10.0, 10.0), 0, 0.8, 0),
    ];
    let c = pr_curve(&dets, &gts, 0, 0.5);
    assert!(c.points.iter().all(|p| p.true_positive));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    /// Raising a true positive above an adjacent false positive never lowers AP.
    #[test]
    fn ap_is_monotone_under_rank_improvement(labels in proptest::collection::vec(any::<bool>(), 2..12), at in 0usize..11) {
        let at = at % (labels.len() - 1);
        let gts: Vec<GroundTruth> = (0..labels.len()).map(|k| gt(bx(20.0 * k as f64, 0.0, 20.0 * k as f64 + 10.0, 10.0), 0, 0)).collect();
        let build = |labels: &[bool]| -> Vec<Detection> {
            labels
                .iter()
                .enumerate()
                .map(|(k, &hit)| {
                    let b = if hit { gts[k].bbox } else { bx(-100.0 - 20.0 * k as f64, 0.0, -90.0 - 20.0 * k as f64, 10.0) };
                    det(b, 0, 1.0 - k as f64 / 100.0, 0)
                })
                .collect()
        };
        let before = average_precision(&pr_curve(&build(&labels), &gts, 0, 0.5), 101).ap;
        if !labels[at] && labels[at + 1] {
            let mut swapped = labels.clone();
            swapped.swap(at, at + 1);
            let after = average_precision(&pr_curve(&build(&swapped), &gts, 0, 0.5), 101).ap;
            prop_assert!(after >= before - 1e-15);
        }
    }
}

#[test]
fn map_of_one_class_is_its_ap() {
    let (dets, gts) = fixture();
    let m = mean_ap(&dets, &gts, &EvalConfig::default());
    let ap = average_precision(&pr_curve(&dets, &gts, 0, 0.5), 101).ap;
    assert_eq!(m.map50, ap);
    assert_eq!(m.per_class.len(), 1);
}

#[test]
fn map_averages_class_aps() {
    let gts = vec![gt(bx(0.0, 0.0, 5.0, 5.0), 0, 0), gt(bx(0.0, 0.0, 5.0, 5.0), 1, 0)];
    let dets = vec![
        det(bx(0.0, 0.0, 5.0, 5.0), 0, 0.9, 0),
        det(bx(50.0, 50.0, 55.0, 55.0), 1, 0.9, 0),
    ];
    let m = mean_ap(&dets, &gts, &EvalConfig::default());
    assert_eq!(m.map50, 0.5);
    let with_extra = [dets.clone(), vec![det(bx(0.0, 0.0, 1.0, 1.0), 7, 0.9, 0)]].concat();
    let m2 = mean_ap(&with_extra, &gts, &EvalConfig::default());
    assert_eq!(m2.map50, 0.5);
    assert_eq!(m2.excluded_classes, vec![7]);
}

/// Jittered boxes over several images and four classes.
fn four_class_fixture(seed: u64) -> (Vec<Detection>, Vec<GroundTruth>) {
    let mut r = rng(seed);
    let mut gts = Vec::new();
    let mut dets = Vec::new();
    for image in 0..6 {
        for _ in 0..5 {
            let (x, y) = (r.random_range(0.0..80.0), r.random_range(0.0..80.0));
            let (w, h) = (r.random_range(5.0..20.0), r.random_range(5.0..20.0));
            let class_id = r.random_range(0..4);
            gts.push(gt(bx(x, y, x + w, y + h), class_id, image));
            if r.random_bool(0.8) {
                let j = |r: &mut rand_chacha::ChaCha8Rng| r.random_range(-2.0..2.0);
                let b = bx(x + j(&mut r), y + j(&mut r), x + w + j(&mut r), y + h + j(&mut r));
                dets.push(det(b, class_id, r.random_range(0.3..1.0), image));
            }
            if r.random_bool(0.4) {
                let (fx, fy) = (r.random_range(0.0..80.0), r.random_range(0.0..80.0));
                dets.push(det(
                    bx(fx, fy, fx + 8.0, fy + 8.0),
                    r.random_range(0..4),
                    r.random_range(0.0..1.0),
                    image,
                ));
            }
        }
    }
    (dets, gts)
}

#[test]
fn four_class_map_equals_hand_averaged_reference() {
    let (dets, gts) = four_class_fixture(17);
    let cfg = EvalConfig::default();
    let m = mean_ap(&dets, &gts, &cfg);
    let classes: Vec<usize> = (0..4).filter(|c| gts.iter().any(|g| g.class_id == *c)).collect();
    let ap_at = |c: usize, t: f64| {
        let curve = pr_curve(&dets, &gts, c, t);
        let pts: Vec<(f64, f64)> = curve.points.iter().map(|p| (p.precision, p.recall)).collect();
        ap_reference(&pts, 101)
    };
    let map50 = classes.iter().map(|&c| ap_at(c, 0.5)).sum::<f64>() / classes.len() as f64;
    let map5095 = classes
        .iter()
        .map(|&c| (0..10).map(|k| ap_at(c, 0.5 + 0.05 * k as f64)).sum::<f64>() / 10.0)
        .sum::<f64>()
        / classes.len() as f64;
    assert!((m.map50 - map50).abs() < 1e-12);
    assert!((m.map5095 - map5095).abs() < 1e-12);
    assert!(m.map5095 <= m.map50);
}

#[test]
fn ground_truth_as_detections_scores_one_everywhere() {
    let (_, gts) = four_class_fixture(3);
    let dets: Vec<Detection> = gts.iter().map(|g| det(g.bbox, g.class_id, 1.0, g.image_id)).collect();
    let m = mean_ap(&dets, &gts, &EvalConfig::default());
    assert_eq!((m.map50, m.map5095, m.precision, m.recall), (1.0, 1.0, 1.0, 1.0));
    for c in &m.per_class {
        assert!(c.ap_sweep.iter().all(|&a| a == 1.0));
    }
}

#[test]
fn threaded_evaluation_equals_single_threaded() {
    let (dets, gts) = four_class_fixture(99);
    let cfg = EvalConfig::default();
    let one = mean_ap(&dets, &gts, &cfg);
    for t in [2, 3, 4, 16] {
        assert_eq!(mean_ap_threaded(&dets, &gts, &cfg, t), one);
    }
}

#[test]
fn summary_uses_table_column_names() {
    let (dets, gts) = fixture();
    let mut s = Summary::from(&mean_ap(&dets, &gts, &EvalConfig::default()));
    s.fps = Some(200.0);
    s.params_millions = Some(6.7);
    let v = serde_json::to_value(&s).unwrap();
    for key in ["P", "R", "mAP@.5", "mAP@.5:.95", "FPS", "Parameter (10^6)"] {
        assert!(v.get(key).is_some(), "{key}");
    }
}

#[test]
fn config_validation() {
    assert!(EvalConfig::default().validate().is_ok());
    let c = EvalConfig {
        iou_sweep: vec![0.5, 0.5],
        ..EvalConfig::default()
    };
    assert!(c.validate().is_err());
    let c = EvalConfig {
        nms_iou_threshold: 1.0,
        ..EvalConfig::default()
    };
    assert!(c.validate().is_err());
}

#[test]
fn fake_timer_gives_images_over_total_time() {
    let mut calls = 0;
    let r = fps_benchmark(
        100,
        |_| {
            calls += 1;
            Ok(())
        },
        &mut FakeTimer::spread(0.5, 100),
        FpsConfig::default(),
    )
    .unwrap();
    assert!((r.mean - 200.0).abs() < 1e-9);
    assert!(r.std < 1e-9);
    assert_eq!(r.runs.len(), 3);
    // Warm-up passes run but are not timed.
    assert_eq!(calls, 2 + 3 * 100);
}

#[test]
fn doubling_per_image_time_halves_fps() {
    let run = |s: f64| {
        fps_benchmark(
            10,
            |_| Ok(()),
            &mut FakeTimer { seconds_per_call: s },
            FpsConfig::default(),
        )
        .unwrap()
        .mean
    };
    assert!((run(0.02) * 2.0 - run(0.01)).abs() < 1e-9);
}

#[test]
fn fps_errors() {
    let mut t = FakeTimer { seconds_per_call: 0.0 };
    assert!(fps_benchmark(10, |_| Ok(()), &mut t, FpsConfig::default()).is_err());
    assert!(fps_benchmark(
        0,
        |_| Ok(()),
        &mut FakeTimer { seconds_per_call: 1.0 },
        FpsConfig::default()
    )
    .is_err());
}

#[test]
fn wall_timer_measures_real_work() {
    let r = fps_benchmark(
        5,
        |_| {
            std::thread::sleep(std::time::Duration::from_millis(2));
            Ok(())
        },
        &mut WallTimer,
        FpsConfig { warmup: 1, repeats: 2 },
    )
    .unwrap();
    assert!(r.mean.is_finite() && r.mean > 0.0 && r.mean < 500.0 + 1e-9);
}
