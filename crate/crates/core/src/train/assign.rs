use serde::{Deserialize, Serialize};

use crate::eval::{BBox, GroundTruth};

/// Grid of one head level.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelGeometry {
    pub h: usize,
    pub w: usize,
    pub stride: usize,
}

/// Cell `(n, i, j)` of `level` assigned to ground truth `gt`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Positive {
    pub level: usize,
    pub n: usize,
    pub i: usize,
    pub j: usize,
    pub gt: usize,
    pub class_id: usize,
    pub bbox: BBox,
}

/// The level whose stride best matches a box: the largest stride not above
/// half the box's longer side, or the finest level if none qualifies.
pub fn select_level(b: &BBox, levels: &[LevelGeometry]) -> usize {
    let half = b.width().max(b.height()) / 2.0;
    let mut best = 0;
    for (k, l) in levels.iter().enumerate() {
        if l.stride as f64 <= half && l.stride >= levels[best].stride {
            best = k;
        }
    }
    best
}

/// Centre-based assignment. `gts[k].image_id` is the batch index. A cell of
/// the selected level is positive for the smallest-area ground truth that
/// contains its centre (ties to the lower index). Output is ordered by
/// `(level, n, i, j)`.
pub fn assign_targets(gts: &[GroundTruth], levels: &[LevelGeometry]) -> Vec<Positive> {
    let mut out = Vec::new();
    for (li, l) in levels.iter().enumerate() {
        let owners: Vec<usize> = (0..gts.len())
            .filter(|&g| select_level(&gts[g].bbox, levels) == li)
            .collect();
        if owners.is_empty() {
            continue;
        }
        let batch = owners.iter().map(|&g| gts[g].image_id).max().unwrap_or(0) + 1;
        let s = l.stride as f64;
        for n in 0..batch {
            for i in 0..l.h {
                for j in 0..l.w {
                    let (cx, cy) = ((j as f64 + 0.5) * s, (i as f64 + 0.5) * s);
                    let mut best: Option<usize> = None;
                    for &g in &owners {
                        let gt = &gts[g];
                        if gt.image_id != n || !gt.bbox.contains(cx, cy) {
                            continue;
                        }
                        if best.is_none_or(|b| gt.bbox.area() < gts[b].bbox.area()) {
                            best = Some(g);
                        }
                    }
                    if let Some(g) = best {
                        out.push(Positive {
                            level: li,
                            n,
                            i,
                            j,
                            gt: g,
                            class_id: gts[g].class_id,
                            bbox: gts[g].bbox,
                        });
                    }
                }
            }
        }
    }
    out
}
