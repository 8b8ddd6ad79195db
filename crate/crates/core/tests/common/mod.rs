//! Reference implementations shared by the integration suites.
#![allow(dead_code)]

use pec_core::eval::{iou, BBox, Detection};
use pec_core::tensor::{ConvParams, PoolKind, Shape, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(dims: [usize; 4], seed: u64) -> Tensor<f64> {
    Tensor::uniform(Shape(dims), -1.0, 1.0, &mut rng(seed))
}

/// Direct six-loop grouped convolution with zero padding.
pub fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, p: &ConvParams) -> Tensor<f64> {
    let [n, _, h, wd] = x.dims();
    let (kh, kw) = p.kernel;
    let (sh, sw) = p.stride;
    let (ph, pw) = p.padding;
    let oh = (h + 2 * ph - kh) / sh + 1;
    let ow = (wd + 2 * pw - kw) / sw + 1;
    let cin_g = p.in_channels / p.groups;
    let cout_g = p.out_channels / p.groups;
    Tensor::from_fn(Shape([n, p.out_channels, oh, ow]), |[ni, co, i, j]| {
        let g = co / cout_g;
        let mut acc = b.map_or(0.0, |b| b.data()[co]);
        for ci in 0..cin_g {
            for a in 0..kh {
                for c in 0..kw {
                    let y = (i * sh + a) as isize - ph as isize;
                    let xx = (j * sw + c) as isize - pw as isize;
                    if y < 0 || xx < 0 || y >= h as isize || xx >= wd as isize {
                        continue;
                    }
                    acc += w.at(co, ci, a, c) * x.at(ni, g * cin_g + ci, y as usize, xx as usize);
                }
            }
        }
        acc
    })
}

/// Max pooling at stride 1 with `-inf` padding of `k / 2`.
pub fn max_pool_same(x: &Tensor<f64>, k: usize) -> Tensor<f64> {
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone(), false);
    let y = tape.pool2d(v, PoolKind::Max, k, 1, k / 2).expect("pool");
    tape.value(y).clone()
}

/// O(n²) greedy suppression used as the NMS oracle: repeatedly take the
/// best remaining box (score, then class, then position) and drop every
/// same-image, same-class box overlapping it by more than the threshold.
pub fn brute_nms(dets: &[Detection], thr: f64) -> Vec<Detection> {
    let mut alive: Vec<bool> = vec![true; dets.len()];
    let mut out = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for i in 0..dets.len() {
            if !alive[i] {
                continue;
            }
            best = match best {
                None => Some(i),
                Some(b) => {
                    let (x, y) = (&dets[i], &dets[b]);
                    let better = x.score > y.score || (x.score == y.score && x.class_id < y.class_id);
                    Some(if better { i } else { b })
                }
            };
        }
        let Some(b) = best else { break };
        alive[b] = false;
        out.push(dets[b]);
        for i in 0..dets.len() {
            if alive[i]
                && dets[i].class_id == dets[b].class_id
                && dets[i].image_id == dets[b].image_id
                && iou(&dets[i].bbox, &dets[b].bbox) > thr
            {
                alive[i] = false;
            }
        }
    }
    out
}

pub fn random_boxes(r: &mut ChaCha8Rng, n: usize, classes: usize, images: usize) -> Vec<Detection> {
    (0..n)
        .map(|_| {
            let x = r.random_range(0.0..90.0);
            let y = r.random_range(0.0..90.0);
            let w = r.random_range(2.0..30.0);
            let h = r.random_range(2.0..30.0);
            Detection {
                bbox: BBox::new(x, y, x + w, y + h),
                class_id: r.random_range(0..classes),
                // Coarse scores force plenty of exact ties.
                score: (r.random_range(0..50) as f64) / 50.0,
                image_id: r.random_range(0..images),
            }
        })
        .collect()
}
