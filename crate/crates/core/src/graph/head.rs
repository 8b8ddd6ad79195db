use rand::Rng;

use crate::error::{cfg_err, Result};
use crate::eval::{BBox, Detection};
use crate::nn::{Cbs, Conv, Forward, Weights};
use crate::tensor::{ConvParams, Real, Tensor, UnaryKind, Var};

/// Prior probability used for the class-logit bias at initialisation.
const CLS_PRIOR: f64 = 0.01;

/// Decoupled head: per level a box branch and a class branch, each two 3×3
/// CBS followed by a 1×1 projection. Box outputs pass through softplus and
/// are distances `(l, t, r, b)` from the cell centre in stride units.
#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub name: String,
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
    pub num_classes: usize,
}

impl Head {
    pub fn new(name: impl Into<String>, channels: Vec<usize>, strides: Vec<usize>, num_classes: usize) -> Self {
        Head {
            name: name.into(),
            channels,
            strides,
            num_classes,
        }
    }

    /// Hidden widths `(box, cls)` for a box branch with `box_outputs` channels.
    pub fn hidden_widths(first_level: usize, num_classes: usize, box_outputs: usize) -> (usize, usize) {
        let c2 = 16.max(first_level / 4).max(box_outputs);
        let c3 = first_level.max(num_classes.min(100));
        (c2, c3)
    }

    fn widths(&self) -> (usize, usize) {
        Head::hidden_widths(self.channels[0], self.num_classes, 4)
    }

    fn branch(&self, kind: &str, level: usize, hidden: usize, out: usize) -> (Cbs, Cbs, Conv) {
        let ch = self.channels[level];
        let p = format!("{}.{kind}{level}", self.name);
        (
            Cbs::square(format!("{p}.0"), ch, hidden, 3, 1),
            Cbs::square(format!("{p}.1"), hidden, hidden, 3, 1),
            Conv::new(format!("{p}.2"), ConvParams::new(hidden, out, 1).bias(true)),
        )
    }

    pub fn init<T: Real>(&self, w: &mut Weights<T>, rng: &mut (impl Rng + ?Sized)) -> Result<()> {
        let (c2, c3) = self.widths();
        let box_bias = (1f64.exp() - 1.0).ln();
        let cls_bias = -((1.0 - CLS_PRIOR) / CLS_PRIOR).ln();
        for level in 0..self.channels.len() {
            for (kind, hidden, out, bias) in [("box", c2, 4, box_bias), ("cls", c3, self.num_classes, cls_bias)] {
                let (a, b, proj) = self.branch(kind, level, hidden, out);
                a.init(w, rng)?;
                b.init(w, rng)?;
                proj.init(w, rng)?;
                let t = w.param_mut(&format!("{}.bias", proj.name))?;
                *t = t.map(|_| T::cast(bias));
            }
        }
        Ok(())
    }

    pub fn forward<T: Real>(&self, f: &mut Forward<T>, features: &[Var]) -> Result<Vec<LevelVars>> {
        if features.len() != self.channels.len() {
            return Err(cfg_err!(
                "head expects {} feature maps, got {}",
                self.channels.len(),
                features.len()
            ));
        }
        let (c2, c3) = self.widths();
        let mut out = Vec::with_capacity(features.len());
        for (level, &x) in features.iter().enumerate() {
            let (a, b, proj) = self.branch("box", level, c2, 4);
            let y = a.forward(f, x)?;
            let y = b.forward(f, y)?;
            let y = proj.forward(f, y)?;
            let boxes = f.tape.unary(y, UnaryKind::Softplus);
            let (a, b, proj) = self.branch("cls", level, c3, self.num_classes);
            let y = a.forward(f, x)?;
            let y = b.forward(f, y)?;
            let cls = proj.forward(f, y)?;
            out.push(LevelVars {
                cls,
                boxes,
                stride: self.strides[level],
            });
        }
        Ok(out)
    }
}

/// Tape handles of one head level.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LevelVars {
    pub cls: Var,
    pub boxes: Var,
    pub stride: usize,
}

/// Materialised head maps of one level.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelOutput<T> {
    /// `(N, num_classes, H, W)` logits.
    pub cls: Tensor<T>,
    /// `(N, 4, H, W)` non-negative distances in stride units.
    pub boxes: Tensor<T>,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutput<T> {
    pub levels: Vec<LevelOutput<T>>,
}

/// Turns head maps into detections for an image of `image_hw` pixels.
/// Batch index becomes the image id.
pub fn decode_head<T: Real>(head: &HeadOutput<T>, conf_threshold: f64, image_hw: (usize, usize)) -> Vec<Detection> {
    let (ih, iw) = (image_hw.0 as f64, image_hw.1 as f64);
    let mut dets = Vec::new();
    for level in &head.levels {
        let s = level.cls.shape();
        let stride = level.stride as f64;
        for n in 0..s.n() {
            for i in 0..s.h() {
                for j in 0..s.w() {
                    let mut best = (0usize, f64::NEG_INFINITY);
                    for c in 0..s.c() {
                        let logit = level.cls.at(n, c, i, j).as_f64();
                        if logit > best.1 {
                            best = (c, logit);
                        }
                    }
                    let score = crate::tensor::sigmoid(best.1);
                    if !(score >= conf_threshold) || score <= 0.0 {
                        continue;
                    }
                    let d = |k| level.boxes.at(n, k, i, j).as_f64().max(0.0) * stride;
                    let cx = (j as f64 + 0.5) * stride;
                    let cy = (i as f64 + 0.5) * stride;
                    let bbox = BBox::new(cx - d(0), cy - d(1), cx + d(2), cy + d(3)).clip(iw, ih);
                    dets.push(Detection {
                        bbox,
                        class_id: best.0,
                        score,
                        image_id: n,
                    });
                }
            }
        }
    }
    dets
}
