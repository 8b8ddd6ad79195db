//! Detection evaluation: boxes, IoU and CIoU, class-wise NMS, PR curves,
//! AP/mAP and FPS measurement.

mod fps;
mod metrics;

use serde::{Deserialize, Serialize};

use crate::error::{cfg_err, Result};

pub use fps::{fps_benchmark, FakeTimer, FpsConfig, FpsReport, Timer, WallTimer};
pub use metrics::{
    average_precision, mean_ap, mean_ap_threaded, nms, pr_curve, ApResult, ClassAp, MapResult, PrCurve, Summary,
};

/// Axis-aligned box in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    /// Corners are reordered so that `x1 <= x2` and `y1 <= y2`.
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox {
            x1: x1.min(x2),
            y1: y1.min(y2),
            x2: x1.max(x2),
            y2: y1.max(y2),
        }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x1 && x <= self.x2 && y >= self.y1 && y <= self.y2
    }

    /// Clips to `[0, width] × [0, height]`.
    pub fn clip(&self, width: f64, height: f64) -> Self {
        BBox {
            x1: self.x1.clamp(0.0, width),
            y1: self.y1.clamp(0.0, height),
            x2: self.x2.clamp(0.0, width),
            y2: self.y2.clamp(0.0, height),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
    pub image_id: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub bbox: BBox,
    pub class_id: usize,
    pub image_id: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub nms_iou_threshold: f64,
    pub match_iou_threshold: f64,
    pub confidence_floor: f64,
    pub ap_points: usize,
    pub iou_sweep: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            nms_iou_threshold: 0.3,
            match_iou_threshold: 0.5,
            confidence_floor: 0.001,
            ap_points: 101,
            iou_sweep: (0..10).map(|k| (50 + 5 * k) as f64 / 100.0).collect(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        let open = |v: f64| v > 0.0 && v < 1.0;
        if !open(self.nms_iou_threshold) || !open(self.match_iou_threshold) {
            return Err(cfg_err!("IoU thresholds must lie in (0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.confidence_floor) {
            return Err(cfg_err!("confidence floor must lie in [0, 1]"));
        }
        if self.ap_points < 2 {
            return Err(cfg_err!("AP grid needs at least 2 points"));
        }
        if self.iou_sweep.is_empty()
            || self.iou_sweep.iter().any(|&v| !open(v))
            || self.iou_sweep.windows(2).any(|w| w[1] <= w[0])
        {
            return Err(cfg_err!(
                "IoU sweep must be non-empty, strictly increasing and inside (0, 1)"
            ));
        }
        Ok(())
    }
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Complete IoU: `IoU − ρ²/c² − α·v`.
pub fn ciou(pred: &BBox, gt: &BBox) -> f64 {
    let i = iou(pred, gt);
    let (pcx, pcy) = pred.center();
    let (gcx, gcy) = gt.center();
    let rho2 = (pcx - gcx).powi(2) + (pcy - gcy).powi(2);
    let cw = pred.x2.max(gt.x2) - pred.x1.min(gt.x1);
    let ch = pred.y2.max(gt.y2) - pred.y1.min(gt.y1);
    let c2 = cw * cw + ch * ch;
    let dist = if c2 > 0.0 { rho2 / c2 } else { 0.0 };
    // atan2(w, h) equals atan(w / h) for h > 0 and stays finite at h = 0.
    let dtheta = gt.width().atan2(gt.height()) - pred.width().atan2(pred.height());
    let v = 4.0 / (std::f64::consts::PI * std::f64::consts::PI) * dtheta * dtheta;
    let alpha = if v > 0.0 { v / ((1.0 - i) + v) } else { 0.0 };
    i - dist - alpha * v
}

pub fn ciou_loss(pred: &BBox, gt: &BBox) -> f64 {
    1.0 - ciou(pred, gt)
}
