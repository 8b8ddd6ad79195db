use std::collections::BTreeSet;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::{iou, Detection, EvalConfig, GroundTruth};

/// Class-wise greedy suppression. Output is sorted by descending score, ties
/// by lower class id then input order.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .total_cmp(&dets[a].score)
            .then(dets[a].class_id.cmp(&dets[b].class_id))
            .then(a.cmp(&b))
    });
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        let d = dets[i];
        let clash = kept
            .iter()
            .any(|k| k.class_id == d.class_id && k.image_id == d.image_id && iou(&k.bbox, &d.bbox) > iou_threshold);
        if !clash {
            kept.push(d);
        }
    }
    kept
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub precision: f64,
    pub recall: f64,
    pub score: f64,
    pub true_positive: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub class_id: usize,
    pub num_gt: usize,
    pub points: Vec<PrPoint>,
    /// Set when the class has no ground truth; recall is then reported as 0.
    pub recall_undefined: bool,
}

impl PrCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("rank,score,tp,precision,recall\n");
        for (k, p) in self.points.iter().enumerate() {
            let _ = writeln!(
                s,
                "{},{:.6},{},{:.6},{:.6}",
                k + 1,
                p.score,
                u8::from(p.true_positive),
                p.precision,
                p.recall
            );
        }
        s
    }
}

/// Cumulative precision/recall after each detection of `class_id`, in
/// descending score order. A detection matches the unmatched ground truth of
/// the same image and class with the highest IoU at or above `match_iou`,
/// ties to the lower ground-truth index.
pub fn pr_curve(dets: &[Detection], gts: &[GroundTruth], class_id: usize, match_iou: f64) -> PrCurve {
    let gt_idx: Vec<usize> = (0..gts.len()).filter(|&i| gts[i].class_id == class_id).collect();
    let mut order: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].class_id == class_id).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let num_gt = gt_idx.len();
    let mut matched = vec![false; gts.len()];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut points = Vec::with_capacity(order.len());
    for i in order {
        let d = &dets[i];
        let mut best: Option<(usize, f64)> = None;
        for &g in &gt_idx {
            if matched[g] || gts[g].image_id != d.image_id {
                continue;
            }
            let v = iou(&d.bbox, &gts[g].bbox);
            if v >= match_iou && best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        let hit = best.is_some();
        if let Some((g, _)) = best {
            matched[g] = true;
            tp += 1;
        } else {
            fp += 1;
        }
        points.push(PrPoint {
            precision: tp as f64 / (tp + fp) as f64,
            recall: if num_gt == 0 { 0.0 } else { tp as f64 / num_gt as f64 },
            score: d.score,
            true_positive: hit,
        });
    }
    PrCurve {
        class_id,
        num_gt,
        points,
        recall_undefined: num_gt == 0,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApResult {
    pub ap: f64,
    /// Set when the curve has no points.
    pub empty: bool,
}

/// Interpolated AP on an `points`-point recall grid `{0, 1/(points−1), …, 1}`:
/// the mean over grid values `r` of the best precision at recall `≥ r`.
pub fn average_precision(curve: &PrCurve, points: usize) -> ApResult {
    if curve.points.is_empty() {
        return ApResult { ap: 0.0, empty: true };
    }
    // Suffix maximum of precision, indexed by curve position.
    let mut best = vec![0.0; curve.points.len()];
    let mut run = 0.0f64;
    for (k, p) in curve.points.iter().enumerate().rev() {
        run = run.max(p.precision);
        best[k] = run;
    }
    let steps = (points - 1) as f64;
    let mut sum = 0.0;
    for g in 0..points {
        let r = g as f64 / steps;
        // Curve recall is non-decreasing, so the first reaching point gives
        // the maximum over all later ones.
        if let Some(k) = curve.points.iter().position(|p| p.recall >= r - 1e-12) {
            sum += best[k];
        }
    }
    ApResult {
        ap: sum / points as f64,
        empty: false,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class_id: usize,
    pub num_gt: usize,
    pub precision: f64,
    pub recall: f64,
    pub ap50: f64,
    /// AP at each sweep threshold.
    pub ap_sweep: Vec<f64>,
    pub ap5095: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapResult {
    pub precision: f64,
    pub recall: f64,
    pub map50: f64,
    pub map5095: f64,
    pub per_class: Vec<ClassAp>,
    /// Classes predicted but absent from the ground truth, left out of the mean.
    pub excluded_classes: Vec<usize>,
}

impl MapResult {
    pub fn per_class_csv(&self) -> String {
        let mut s = String::from("class_id,num_gt,precision,recall,ap50,ap5095\n");
        for c in &self.per_class {
            let _ = writeln!(
                s,
                "{},{},{:.6},{:.6},{:.6},{:.6}",
                c.class_id, c.num_gt, c.precision, c.recall, c.ap50, c.ap5095
            );
        }
        s
    }
}

fn class_ap(dets: &[Detection], gts: &[GroundTruth], class_id: usize, cfg: &EvalConfig) -> ClassAp {
    let base = pr_curve(dets, gts, class_id, cfg.match_iou_threshold);
    let ap50 = average_precision(&base, cfg.ap_points).ap;
    let ap_sweep: Vec<f64> = cfg
        .iou_sweep
        .iter()
        .map(|&t| average_precision(&pr_curve(dets, gts, class_id, t), cfg.ap_points).ap)
        .collect();
    let last = base.points.last();
    ClassAp {
        class_id,
        num_gt: base.num_gt,
        precision: last.map_or(0.0, |p| p.precision),
        recall: last.map_or(0.0, |p| p.recall),
        ap50,
        ap5095: ap_sweep.iter().sum::<f64>() / ap_sweep.len() as f64,
        ap_sweep,
    }
}

pub fn mean_ap(dets: &[Detection], gts: &[GroundTruth], cfg: &EvalConfig) -> MapResult {
    mean_ap_threaded(dets, gts, cfg, 1)
}

/// [`mean_ap`] with classes evaluated on up to `threads` scoped threads.
/// Results are merged in class order, so the output does not depend on the
/// thread count.
pub fn mean_ap_threaded(dets: &[Detection], gts: &[GroundTruth], cfg: &EvalConfig, threads: usize) -> MapResult {
    let gt_classes: BTreeSet<usize> = gts.iter().map(|g| g.class_id).collect();
    let excluded: Vec<usize> = dets
        .iter()
        .map(|d| d.class_id)
        .collect::<BTreeSet<_>>()
        .difference(&gt_classes)
        .copied()
        .collect();
    let classes: Vec<usize> = gt_classes.into_iter().collect();
    let threads = threads.clamp(1, classes.len().max(1));
    let per_class: Vec<ClassAp> = if threads == 1 {
        classes.iter().map(|&c| class_ap(dets, gts, c, cfg)).collect()
    } else {
        let chunk = classes.len().div_ceil(threads);
        std::thread::scope(|s| {
            let handles: Vec<_> = classes
                .chunks(chunk)
                .map(|cs| s.spawn(move || cs.iter().map(|&c| class_ap(dets, gts, c, cfg)).collect::<Vec<_>>()))
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("evaluation thread panicked"))
                .collect()
        })
    };
    let mean = |f: &dyn Fn(&ClassAp) -> f64| {
        if per_class.is_empty() {
            0.0
        } else {
            per_class.iter().map(f).sum::<f64>() / per_class.len() as f64
        }
    };
    MapResult {
        precision: mean(&|c| c.precision),
        recall: mean(&|c| c.recall),
        map50: mean(&|c| c.ap50),
        map5095: mean(&|c| c.ap5095),
        per_class,
        excluded_classes: excluded,
    }
}

/// Headline metrics under the usual table column names.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    #[serde(rename = "P")]
    pub precision: f64,
    #[serde(rename = "R")]
    pub recall: f64,
    #[serde(rename = "mAP@.5")]
    pub map50: f64,
    #[serde(rename = "mAP@.5:.95")]
    pub map5095: f64,
    #[serde(rename = "FPS", skip_serializing_if = "Option::is_none")]
    pub fps: Option<f64>,
    #[serde(rename = "Parameter (10^6)", skip_serializing_if = "Option::is_none")]
    pub params_millions: Option<f64>,
}

impl From<&MapResult> for Summary {
    fn from(m: &MapResult) -> Self {
        Summary {
            precision: m.precision,
            recall: m.recall,
            map50: m.map50,
            map5095: m.map5095,
            fps: None,
            params_millions: None,
        }
    }
}
