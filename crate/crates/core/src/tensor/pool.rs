use serde::{Deserialize, Serialize};

use super::tape::{Op, Tape, Var};
use super::{Real, Shape, Tensor};
use crate::error::{cfg_err, dim_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    Max,
    Avg,
}

fn pooled_extent(len: usize, k: usize, s: usize, p: usize) -> Result<usize> {
    if len + 2 * p < k {
        return Err(dim_err!(
            "pooling window {k} with padding {p} exceeds input extent {len}"
        ));
    }
    Ok((len + 2 * p - k) / s + 1)
}

pub(crate) fn pool_out_shape(s: Shape, k: usize, stride: usize, p: usize) -> Result<Shape> {
    if k == 0 || stride == 0 {
        return Err(cfg_err!("pool kernel and stride must be >= 1"));
    }
    if 2 * p > k {
        return Err(cfg_err!("pool padding {p} must not exceed half the window {k}"));
    }
    let ho = pooled_extent(s.h(), k, stride, p)?;
    let wo = pooled_extent(s.w(), k, stride, p)?;
    Shape::new(s.n(), s.c(), ho, wo)
}

/// Max pooling with −∞ padding. Returns the output and, for each output
/// element, the flat input index of the first maximum in scan order.
pub(crate) fn max_pool_forward<T: Real>(
    x: &Tensor<T>,
    k: usize,
    stride: usize,
    p: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let s = x.shape();
    let os = pool_out_shape(s, k, stride, p)?;
    let mut out = Vec::with_capacity(os.numel());
    let mut argmax = Vec::with_capacity(os.numel());
    for n in 0..s.n() {
        for c in 0..s.c() {
            let base = (n * s.c() + c) * s.hw();
            for oy in 0..os.h() {
                for ox in 0..os.w() {
                    let mut best = T::neg_infinity();
                    let mut best_idx = usize::MAX;
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - p as isize;
                        if iy < 0 || iy >= s.h() as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - p as isize;
                            if ix < 0 || ix >= s.w() as isize {
                                continue;
                            }
                            let idx = base + iy as usize * s.w() + ix as usize;
                            let v = x.data()[idx];
                            if best_idx == usize::MAX || v > best {
                                best = v;
                                best_idx = idx;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_idx);
                }
            }
        }
    }
    Ok((Tensor::new(os, out)?, argmax))
}

pub(crate) fn avg_pool_forward<T: Real>(x: &Tensor<T>, k: usize, stride: usize, p: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    let os = pool_out_shape(s, k, stride, p)?;
    let mut out = Vec::with_capacity(os.numel());
    for n in 0..s.n() {
        for c in 0..s.c() {
            let base = (n * s.c() + c) * s.hw();
            for oy in 0..os.h() {
                for ox in 0..os.w() {
                    let mut acc = T::zero();
                    let mut count = 0usize;
                    for_window(s, oy, ox, k, stride, p, |iy, ix| {
                        acc += x.data()[base + iy * s.w() + ix];
                        count += 1;
                    });
                    out.push(acc / T::cast(count as f64));
                }
            }
        }
    }
    Tensor::new(os, out)
}

fn for_window(s: Shape, oy: usize, ox: usize, k: usize, stride: usize, p: usize, mut f: impl FnMut(usize, usize)) {
    for ky in 0..k {
        let iy = (oy * stride + ky) as isize - p as isize;
        if iy < 0 || iy >= s.h() as isize {
            continue;
        }
        for kx in 0..k {
            let ix = (ox * stride + kx) as isize - p as isize;
            if ix >= 0 && (ix as usize) < s.w() {
                f(iy as usize, ix as usize);
            }
        }
    }
}

pub(crate) fn avg_pool_backward<T: Real>(
    in_shape: Shape,
    out_shape: Shape,
    k: usize,
    stride: usize,
    p: usize,
    dy: &[T],
) -> Vec<T> {
    let mut dx = vec![T::zero(); in_shape.numel()];
    let mut o = 0;
    for n in 0..in_shape.n() {
        for c in 0..in_shape.c() {
            let base = (n * in_shape.c() + c) * in_shape.hw();
            for oy in 0..out_shape.h() {
                for ox in 0..out_shape.w() {
                    let mut count = 0usize;
                    for_window(in_shape, oy, ox, k, stride, p, |_, _| count += 1);
                    let share = dy[o] / T::cast(count as f64);
                    for_window(in_shape, oy, ox, k, stride, p, |iy, ix| {
                        dx[base + iy * in_shape.w() + ix] += share;
                    });
                    o += 1;
                }
            }
        }
    }
    dx
}

pub(crate) fn scatter_argmax<T: Real>(len: usize, argmax: &[usize], dy: &[T]) -> Vec<T> {
    let mut dx = vec![T::zero(); len];
    for (&i, &g) in argmax.iter().zip(dy) {
        dx[i] += g;
    }
    dx
}

impl<T: Real> Tape<T> {
    /// Square-window pooling. Max pooling pads with −∞ and routes gradient to
    /// the first maximum in scan order; average pooling excludes padded cells
    /// from the divisor.
    pub fn pool2d(&mut self, input: Var, kind: PoolKind, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        match kind {
            PoolKind::Max => {
                let (out, argmax) = max_pool_forward(self.value(input), kernel, stride, padding)?;
                Ok(self.push(out, Op::MaxPool { input, argmax }))
            }
            PoolKind::Avg => {
                let out = avg_pool_forward(self.value(input), kernel, stride, padding)?;
                Ok(self.push(
                    out,
                    Op::AvgPool {
                        input,
                        kernel,
                        stride,
                        padding,
                    },
                ))
            }
        }
    }

    /// Global max over (H, W) per sample and channel → `(N, C, 1, 1)`.
    pub fn global_max_pool(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let s = x.shape();
        let hw = s.hw();
        let mut out = Vec::with_capacity(s.n() * s.c());
        let mut argmax = Vec::with_capacity(s.n() * s.c());
        for (plane, chunk) in x.data().chunks(hw).enumerate() {
            let mut best = 0;
            for (i, v) in chunk.iter().enumerate() {
                if *v > chunk[best] {
                    best = i;
                }
            }
            out.push(chunk[best]);
            argmax.push(plane * hw + best);
        }
        let t = Tensor::new(Shape([s.n(), s.c(), 1, 1]), out).expect("consistent shape");
        self.push(t, Op::MaxHw { input, argmax })
    }
}
