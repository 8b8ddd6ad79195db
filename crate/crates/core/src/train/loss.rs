use serde::{Deserialize, Serialize};

use super::assign::Positive;
use crate::error::{cfg_err, Result};
use crate::graph::LevelVars;
use crate::tensor::{Real, Shape, Tape, Tensor, UnaryKind, Var};

const CIOU_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub r#box: f64,
    pub cls: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { r#box: 2.0, cls: 1.0 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub box_loss: f64,
    pub cls_loss: f64,
    /// Always zero: no distribution-style box loss is implemented.
    pub dfl_loss: f64,
    pub total: f64,
    pub positives: usize,
    /// Set when the batch has no positive cell (box loss is then 0).
    pub no_positives: bool,
}

pub struct Loss {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

/// Per-level dense target maps in stride units.
struct LevelTargets<T> {
    cls: Tensor<T>,
    mask: Tensor<T>,
    /// `x1, y1, x2, y2` maps, each `(N, 1, H, W)`.
    corners: [Tensor<T>; 4],
    count: usize,
}

fn level_targets<T: Real>(
    tape: &Tape<T>,
    lv: &LevelVars,
    level: usize,
    positives: &[Positive],
) -> Result<LevelTargets<T>> {
    let s = tape.shape(lv.cls);
    let bs = tape.shape(lv.boxes);
    if bs != s.with_c(4) {
        return Err(crate::error::dim_err!("box map {bs} does not match class map {s}"));
    }
    let plane = Shape([s.n(), 1, s.h(), s.w()]);
    let mut cls = Tensor::zeros(s);
    let mut mask = Tensor::zeros(plane);
    // Negatives get a unit box so the masked-out CIoU stays finite.
    let mut corners = [
        Tensor::zeros(plane),
        Tensor::zeros(plane),
        Tensor::ones(plane),
        Tensor::ones(plane),
    ];
    let stride = lv.stride as f64;
    let mut count = 0;
    for p in positives.iter().filter(|p| p.level == level) {
        if p.n >= s.n() || p.i >= s.h() || p.j >= s.w() || p.class_id >= s.c() {
            return Err(cfg_err!("positive {p:?} lies outside head level {level} ({s})"));
        }
        cls.set(p.n, p.class_id, p.i, p.j, T::one());
        mask.set(p.n, 0, p.i, p.j, T::one());
        let b = [p.bbox.x1, p.bbox.y1, p.bbox.x2, p.bbox.y2];
        for (t, v) in corners.iter_mut().zip(b) {
            t.set(p.n, 0, p.i, p.j, T::cast(v / stride));
        }
        count += 1;
    }
    Ok(LevelTargets {
        cls,
        mask,
        corners,
        count,
    })
}

fn cnst<T: Real>(tape: &mut Tape<T>, v: f64) -> Var {
    tape.constant(Tensor::scalar(T::cast(v)))
}

/// Dense CIoU map between predicted distances `(N, 4, H, W)` (stride units,
/// measured from cell centres) and constant target corners.
pub fn ciou_map<T: Real>(tape: &mut Tape<T>, boxes: Var, target: &[Tensor<T>; 4]) -> Result<Var> {
    let s = tape.shape(boxes);
    let plane = Shape([1, 1, s.h(), s.w()]);
    let cx = tape.constant(Tensor::from_fn(plane, |[_, _, _, j]| T::cast(j as f64 + 0.5)));
    let cy = tape.constant(Tensor::from_fn(plane, |[_, _, i, _]| T::cast(i as f64 + 0.5)));
    let d = tape.split_channels(boxes, &[1, 1, 1, 1])?;
    let (l, t, r, b) = (d[0], d[1], d[2], d[3]);
    let px1 = tape.sub(cx, l)?;
    let py1 = tape.sub(cy, t)?;
    let px2 = tape.add(cx, r)?;
    let py2 = tape.add(cy, b)?;
    let tx1 = tape.constant(target[0].clone());
    let ty1 = tape.constant(target[1].clone());
    let tx2 = tape.constant(target[2].clone());
    let ty2 = tape.constant(target[3].clone());
    let eps = cnst(tape, CIOU_EPS);

    let pw = tape.add(l, r)?;
    let ph = tape.add(t, b)?;
    let tw = tape.sub(tx2, tx1)?;
    let th = tape.sub(ty2, ty1)?;

    let ix2 = tape.minimum(px2, tx2)?;
    let ix1 = tape.maximum(px1, tx1)?;
    let iw = tape.sub(ix2, ix1)?;
    let iw = tape.relu(iw);
    let iy2 = tape.minimum(py2, ty2)?;
    let iy1 = tape.maximum(py1, ty1)?;
    let ih = tape.sub(iy2, iy1)?;
    let ih = tape.relu(ih);
    let inter = tape.mul(iw, ih)?;
    let area_p = tape.mul(pw, ph)?;
    let area_t = tape.mul(tw, th)?;
    let union = tape.add(area_p, area_t)?;
    let union = tape.sub(union, inter)?;
    let union = tape.add(union, eps)?;
    let iou = tape.div(inter, union)?;

    let ex2 = tape.maximum(px2, tx2)?;
    let ex1 = tape.minimum(px1, tx1)?;
    let cw = tape.sub(ex2, ex1)?;
    let ey2 = tape.maximum(py2, ty2)?;
    let ey1 = tape.minimum(py1, ty1)?;
    let ch = tape.sub(ey2, ey1)?;
    let cw2 = tape.unary(cw, UnaryKind::Square);
    let ch2 = tape.unary(ch, UnaryKind::Square);
    let c2 = tape.add(cw2, ch2)?;
    let c2 = tape.add(c2, eps)?;

    // Twice the centre offsets, so ρ² is a quarter of their squared norm.
    let psx = tape.add(px1, px2)?;
    let tsx = tape.add(tx1, tx2)?;
    let dx = tape.sub(psx, tsx)?;
    let psy = tape.add(py1, py2)?;
    let tsy = tape.add(ty1, ty2)?;
    let dy = tape.sub(psy, tsy)?;
    let dx2 = tape.unary(dx, UnaryKind::Square);
    let dy2 = tape.unary(dy, UnaryKind::Square);
    let rho2 = tape.add(dx2, dy2)?;
    let rho2 = tape.scale(rho2, T::cast(0.25));
    let dist = tape.div(rho2, c2)?;

    let ph_e = tape.add(ph, eps)?;
    let th_e = tape.add(th, eps)?;
    let ap = tape.div(pw, ph_e)?;
    let at = tape.div(tw, th_e)?;
    let ap = tape.unary(ap, UnaryKind::Atan);
    let at = tape.unary(at, UnaryKind::Atan);
    let dang = tape.sub(at, ap)?;
    let v = tape.unary(dang, UnaryKind::Square);
    let v = tape.scale(v, T::cast(4.0 / (std::f64::consts::PI * std::f64::consts::PI)));
    let one = cnst(tape, 1.0);
    let denom = tape.sub(v, iou)?;
    let denom = tape.add(denom, one)?;
    let denom = tape.add(denom, eps)?;
    let alpha = tape.div(v, denom)?;
    let av = tape.mul(alpha, v)?;

    let out = tape.sub(iou, dist)?;
    tape.sub(out, av)
}

/// Mean BCE over every cell and class of every level, plus mean `1 − CIoU`
/// over positive cells, combined as `w_box·box + w_cls·cls`.
pub fn compute_loss<T: Real>(
    tape: &mut Tape<T>,
    levels: &[LevelVars],
    positives: &[Positive],
    weights: LossWeights,
) -> Result<Loss> {
    let targets: Vec<LevelTargets<T>> = levels
        .iter()
        .enumerate()
        .map(|(k, lv)| level_targets(tape, lv, k, positives))
        .collect::<Result<_>>()?;
    let npos: usize = targets.iter().map(|t| t.count).sum();
    if npos != positives.len() {
        return Err(cfg_err!(
            "{} positives reference missing levels",
            positives.len() - npos
        ));
    }
    let cells: usize = levels.iter().map(|lv| tape.shape(lv.cls).numel()).sum();
    let inv_cells = T::one() / T::cast(cells as f64);

    let mut cls = None;
    for (lv, t) in levels.iter().zip(&targets) {
        let term = tape.bce_with_logits(lv.cls, &t.cls, inv_cells)?;
        cls = Some(match cls {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    let cls = cls.ok_or_else(|| cfg_err!("loss needs at least one head level"))?;

    let mut boxl = None;
    if npos > 0 {
        let inv_pos = T::one() / T::cast(npos as f64);
        for (lv, t) in levels.iter().zip(&targets) {
            if t.count == 0 {
                continue;
            }
            let ciou = ciou_map(tape, lv.boxes, &t.corners)?;
            let mask = tape.constant(t.mask.clone());
            // Σ mask·(1 − CIoU) = Σ mask − Σ mask·CIoU.
            let masked = tape.mul(ciou, mask)?;
            let s = tape.sum(masked);
            let s = tape.scale(s, -inv_pos);
            let share = cnst(tape, t.count as f64 / npos as f64);
            let term = tape.add(s, share)?;
            boxl = Some(match boxl {
                None => term,
                Some(acc) => tape.add(acc, term)?,
            });
        }
    }
    let wc = tape.scale(cls, T::cast(weights.cls));
    let (total, box_value) = match boxl {
        Some(b) => {
            let wb = tape.scale(b, T::cast(weights.r#box));
            (tape.add(wb, wc)?, tape.value(b).item().as_f64())
        }
        None => (wc, 0.0),
    };
    let breakdown = LossBreakdown {
        box_loss: box_value,
        cls_loss: tape.value(cls).item().as_f64(),
        dfl_loss: 0.0,
        total: tape.value(total).item().as_f64(),
        positives: npos,
        no_positives: npos == 0,
    };
    Ok(Loss { total, breakdown })
}
