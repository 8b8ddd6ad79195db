use serde::{Deserialize, Serialize};

use super::tape::{Op, Tape, Var};
use super::{Real, Shape, Tensor};
use crate::error::{dim_err, Result};

/// Spatial axis (or both) reduced by [`Tape::mean_over`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    /// Pool over height: `(N, C, H, W)` → `(N, C, 1, W)`.
    Height,
    /// Pool over width: `(N, C, H, W)` → `(N, C, H, 1)`.
    Width,
    /// Pool over both: `(N, C, H, W)` → `(N, C, 1, 1)`.
    Both,
}

fn mean_shape(s: Shape, axis: Axis) -> Shape {
    match axis {
        Axis::Height => Shape([s.n(), s.c(), 1, s.w()]),
        Axis::Width => Shape([s.n(), s.c(), s.h(), 1]),
        Axis::Both => Shape([s.n(), s.c(), 1, 1]),
    }
}

fn reduced_index(s: Shape, axis: Axis, plane: usize, h: usize, w: usize) -> usize {
    match axis {
        Axis::Height => plane * s.w() + w,
        Axis::Width => plane * s.h() + h,
        Axis::Both => plane,
    }
}

fn mean_count(s: Shape, axis: Axis) -> usize {
    match axis {
        Axis::Height => s.h(),
        Axis::Width => s.w(),
        Axis::Both => s.hw(),
    }
}

pub(crate) fn mean_backward<T: Real>(s: Shape, axis: Axis, dy: &[T]) -> Vec<T> {
    let inv = T::one() / T::cast(mean_count(s, axis) as f64);
    let mut dx = vec![T::zero(); s.numel()];
    let mut i = 0;
    for plane in 0..s.n() * s.c() {
        for h in 0..s.h() {
            for w in 0..s.w() {
                dx[i] = dy[reduced_index(s, axis, plane, h, w)] * inv;
                i += 1;
            }
        }
    }
    dx
}

pub(crate) fn concat_backward<T: Real>(shapes: &[Shape], dy: &[T]) -> Vec<Vec<T>> {
    let n = shapes[0].n();
    let hw = shapes[0].hw();
    let total_c: usize = shapes.iter().map(|s| s.c()).sum();
    let mut parts: Vec<Vec<T>> = shapes.iter().map(|s| Vec::with_capacity(s.numel())).collect();
    for b in 0..n {
        let mut offset = 0;
        for (part, s) in parts.iter_mut().zip(shapes) {
            let start = (b * total_c + offset) * hw;
            part.extend_from_slice(&dy[start..start + s.c() * hw]);
            offset += s.c();
        }
    }
    parts
}

pub(crate) fn slice_backward<T: Real>(s: Shape, start: usize, len: usize, dy: &[T]) -> Vec<T> {
    let hw = s.hw();
    let mut dx = vec![T::zero(); s.numel()];
    for n in 0..s.n() {
        let dst = (n * s.c() + start) * hw;
        let src = n * len * hw;
        dx[dst..dst + len * hw].copy_from_slice(&dy[src..src + len * hw]);
    }
    dx
}

pub(crate) fn upsample_backward<T: Real>(s: Shape, dy: &[T]) -> Vec<T> {
    let (h, w) = (s.h(), s.w());
    let mut dx = vec![T::zero(); s.numel()];
    for plane in 0..s.n() * s.c() {
        let ob = plane * 4 * h * w;
        for y in 0..2 * h {
            for x in 0..2 * w {
                dx[plane * h * w + (y / 2) * w + x / 2] += dy[ob + y * 2 * w + x];
            }
        }
    }
    dx
}

pub(crate) fn downsample_backward<T: Real>(s: Shape, dy: &[T]) -> Vec<T> {
    let (h, w) = (s.h(), s.w());
    let (ho, wo) = (h / 2, w / 2);
    let mut dx = vec![T::zero(); s.numel()];
    for plane in 0..s.n() * s.c() {
        for y in 0..ho {
            for x in 0..wo {
                dx[plane * h * w + 2 * y * w + 2 * x] += dy[plane * ho * wo + y * wo + x];
            }
        }
    }
    dx
}

pub(crate) fn softmax_channels_backward<T: Real>(y: &Tensor<T>, dy: &[T]) -> Vec<T> {
    let s = y.shape();
    let hw = s.hw();
    let mut dx = vec![T::zero(); s.numel()];
    for n in 0..s.n() {
        for p in 0..hw {
            let idx = |c: usize| (n * s.c() + c) * hw + p;
            let dot: T = (0..s.c()).map(|c| y.data()[idx(c)] * dy[idx(c)]).sum();
            for c in 0..s.c() {
                dx[idx(c)] = y.data()[idx(c)] * (dy[idx(c)] - dot);
            }
        }
    }
    dx
}

pub(crate) fn sum_channels_backward<T: Real>(s: Shape, dy: &[T]) -> Vec<T> {
    let hw = s.hw();
    let mut dx = vec![T::zero(); s.numel()];
    for n in 0..s.n() {
        for c in 0..s.c() {
            let base = (n * s.c() + c) * hw;
            dx[base..base + hw].copy_from_slice(&dy[n * hw..(n + 1) * hw]);
        }
    }
    dx
}

impl<T: Real> Tape<T> {
    /// Arithmetic mean along one or both spatial axes.
    pub fn mean_over(&mut self, input: Var, axis: Axis) -> Var {
        let x = self.value(input);
        let s = x.shape();
        let os = mean_shape(s, axis);
        let mut out = vec![T::zero(); os.numel()];
        let mut i = 0;
        for plane in 0..s.n() * s.c() {
            for h in 0..s.h() {
                for w in 0..s.w() {
                    out[reduced_index(s, axis, plane, h, w)] += x.data()[i];
                    i += 1;
                }
            }
        }
        let inv = T::one() / T::cast(mean_count(s, axis) as f64);
        out.iter_mut().for_each(|v| *v *= inv);
        let t = Tensor::new(os, out).expect("consistent shape");
        self.push(t, Op::Mean { input, axis })
    }

    /// Concatenates along the channel axis. All inputs share N, H and W.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            return Err(dim_err!("concat needs at least one input"));
        };
        let s0 = self.shape(first);
        for &v in inputs {
            let s = self.shape(v);
            if s.n() != s0.n() || s.h() != s0.h() || s.w() != s0.w() {
                return Err(dim_err!("concat inputs disagree: {s0} vs {s}"));
            }
        }
        let total_c: usize = inputs.iter().map(|&v| self.shape(v).c()).sum();
        let hw = s0.hw();
        let mut data = Vec::with_capacity(s0.n() * total_c * hw);
        for b in 0..s0.n() {
            for &v in inputs {
                let t = self.value(v);
                let c = t.shape().c();
                data.extend_from_slice(&t.data()[b * c * hw..(b + 1) * c * hw]);
            }
        }
        let out = Tensor::new(s0.with_c(total_c), data)?;
        Ok(self.push(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
            },
        ))
    }

    /// Channels `[start, start + len)`.
    pub fn slice_channels(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(input).channels(start, len)?;
        Ok(self.push(out, Op::Slice { input, start }))
    }

    /// Splits along channels into consecutive slices of the given sizes.
    pub fn split_channels(&mut self, input: Var, sizes: &[usize]) -> Result<Vec<Var>> {
        let c = self.shape(input).c();
        let total: usize = sizes.iter().sum();
        if total != c {
            return Err(dim_err!("split sizes {sizes:?} do not sum to {c} channels"));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &len in sizes {
            out.push(self.slice_channels(input, start, len)?);
            start += len;
        }
        Ok(out)
    }

    /// Reinterprets the contiguous buffer with a new shape of equal size.
    pub fn reshape(&mut self, input: Var, dims: [usize; 4]) -> Result<Var> {
        let out = self.value(input).reshape(dims)?;
        Ok(self.push(out, Op::Reshape { input }))
    }

    /// Nearest-neighbour 2× upsampling: every cell becomes a 2×2 block.
    pub fn upsample2x(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let s = x.shape();
        let (h, w) = (s.h(), s.w());
        let os = Shape([s.n(), s.c(), 2 * h, 2 * w]);
        let mut out = Vec::with_capacity(os.numel());
        for plane in x.data().chunks(h * w) {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out.push(plane[(y / 2) * w + xx / 2]);
                }
            }
        }
        let t = Tensor::new(os, out).expect("consistent shape");
        self.push(t, Op::Upsample { input })
    }

    /// Nearest 2× downsampling keeping the top-left cell of every 2×2 block.
    pub fn downsample2x(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let s = x.shape();
        if !s.h().is_multiple_of(2) || !s.w().is_multiple_of(2) {
            return Err(dim_err!("downsample needs even extents, got {s}"));
        }
        let (h, w) = (s.h(), s.w());
        let os = Shape([s.n(), s.c(), h / 2, w / 2]);
        let mut out = Vec::with_capacity(os.numel());
        for plane in x.data().chunks(h * w) {
            for y in 0..h / 2 {
                for xx in 0..w / 2 {
                    out.push(plane[2 * y * w + 2 * xx]);
                }
            }
        }
        let t = Tensor::new(os, out)?;
        Ok(self.push(t, Op::Downsample { input }))
    }

    /// Softmax across the channel axis at every (n, h, w).
    pub fn softmax_channels(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let s = x.shape();
        let hw = s.hw();
        let mut out = vec![T::zero(); s.numel()];
        for n in 0..s.n() {
            for p in 0..hw {
                let idx = |c: usize| (n * s.c() + c) * hw + p;
                let m = (0..s.c()).map(|c| x.data()[idx(c)]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for c in 0..s.c() {
                    let e = (x.data()[idx(c)] - m).exp();
                    out[idx(c)] = e;
                    z += e;
                }
                for c in 0..s.c() {
                    out[idx(c)] /= z;
                }
            }
        }
        let t = Tensor::new(s, out).expect("consistent shape");
        self.push(t, Op::SoftmaxChannels { input })
    }

    /// Sum across channels → `(N, 1, H, W)`.
    pub fn sum_channels(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let s = x.shape();
        let hw = s.hw();
        let mut out = vec![T::zero(); s.n() * hw];
        for n in 0..s.n() {
            for c in 0..s.c() {
                let base = (n * s.c() + c) * hw;
                for p in 0..hw {
                    out[n * hw + p] += x.data()[base + p];
                }
            }
        }
        let t = Tensor::new(s.with_c(1), out).expect("consistent shape");
        self.push(t, Op::SumChannels { input })
    }
}
