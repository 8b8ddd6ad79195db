use serde::{Deserialize, Serialize};

use super::tape::{Op, Tape, Var};
use super::{Real, Shape, Tensor};
use crate::error::{cfg_err, dim_err, Result};

/// Geometry of a 2-D convolution. Dilation is always 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvParams {
    pub in_channels: usize,
    pub out_channels: usize,
    pub groups: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub has_bias: bool,
}

impl ConvParams {
    /// Square `k×k` kernel, stride 1, "same" padding, no bias, one group.
    pub fn new(in_channels: usize, out_channels: usize, k: usize) -> Self {
        ConvParams {
            in_channels,
            out_channels,
            groups: 1,
            kernel: (k, k),
            stride: (1, 1),
            padding: (k / 2, k / 2),
            has_bias: false,
        }
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = (s, s);
        self
    }

    pub fn padding(mut self, ph: usize, pw: usize) -> Self {
        self.padding = (ph, pw);
        self
    }

    pub fn groups(mut self, g: usize) -> Self {
        self.groups = g;
        self
    }

    pub fn bias(mut self, b: bool) -> Self {
        self.has_bias = b;
        self
    }

    pub fn kernel(mut self, kh: usize, kw: usize) -> Self {
        self.kernel = (kh, kw);
        self
    }

    /// "Same" padding for the current kernel. Only odd kernels qualify.
    pub fn same(mut self) -> Result<Self> {
        self.padding = same_padding(self.kernel)?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let (kh, kw) = self.kernel;
        let (sh, sw) = self.stride;
        if self.in_channels == 0 || self.out_channels == 0 || self.groups == 0 {
            return Err(cfg_err!("conv channels and groups must be positive: {self:?}"));
        }
        if kh == 0 || kw == 0 || sh == 0 || sw == 0 {
            return Err(cfg_err!("conv kernel and stride must be positive: {self:?}"));
        }
        if !self.in_channels.is_multiple_of(self.groups) || !self.out_channels.is_multiple_of(self.groups) {
            return Err(cfg_err!(
                "groups {} must divide in_channels {} and out_channels {}",
                self.groups,
                self.in_channels,
                self.out_channels
            ));
        }
        Ok(())
    }

    pub fn weight_shape(&self) -> Shape {
        Shape([
            self.out_channels,
            self.in_channels / self.groups,
            self.kernel.0,
            self.kernel.1,
        ])
    }

    pub fn weight_count(&self) -> usize {
        self.weight_shape().numel()
    }

    /// Output spatial extents for an `h×w` input.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel;
        let (sh, sw) = self.stride;
        let (ph, pw) = self.padding;
        if h + 2 * ph < kh || w + 2 * pw < kw {
            return Err(dim_err!(
                "input {h}x{w} with padding {ph}x{pw} is smaller than kernel {kh}x{kw}"
            ));
        }
        Ok(((h + 2 * ph - kh) / sh + 1, (w + 2 * pw - kw) / sw + 1))
    }
}

pub(crate) fn same_padding(kernel: (usize, usize)) -> Result<(usize, usize)> {
    let (kh, kw) = kernel;
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(cfg_err!("same padding requires odd kernel extents, got {kh}x{kw}"));
    }
    Ok((kh / 2, kw / 2))
}

struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.sh == 1 && self.sw == 1 && self.ph == 0 && self.pw == 0
    }
}

/// Column matrix of shape `(c·kh·kw) × (ho·wo)` for one image and group.
fn im2col<T: Real>(x: &[T], g: &Geometry, col: &mut [T]) {
    let p = g.ho * g.wo;
    for ci in 0..g.c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((ci * g.kh + ky) * g.kw + kx) * p;
                for oy in 0..g.ho {
                    let iy = (oy * g.sh + ky) as isize - g.ph as isize;
                    let dst = &mut col[row + oy * g.wo..row + (oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.sw + kx) as isize - g.pw as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(col: &[T], g: &Geometry, dx: &mut [T]) {
    let p = g.ho * g.wo;
    for ci in 0..g.c {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((ci * g.kh + ky) * g.kw + kx) * p;
                for oy in 0..g.ho {
                    let iy = (oy * g.sh + ky) as isize - g.ph as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &col[row + oy * g.wo..row + (oy + 1) * g.wo];
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, s) in src.iter().enumerate() {
                        let ix = (ox * g.sw + kx) as isize - g.pw as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[ix as usize] += *s;
                        }
                    }
                }
            }
        }
    }
}

fn geometry(input: Shape, params: &ConvParams) -> Result<Geometry> {
    let (ho, wo) = params.output_hw(input.h(), input.w())?;
    Ok(Geometry {
        c: params.in_channels / params.groups,
        h: input.h(),
        w: input.w(),
        kh: params.kernel.0,
        kw: params.kernel.1,
        sh: params.stride.0,
        sw: params.stride.1,
        ph: params.padding.0,
        pw: params.padding.1,
        ho,
        wo,
    })
}

pub(crate) fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    params: &ConvParams,
) -> Result<Tensor<T>> {
    params.validate()?;
    let s = x.shape();
    if s.c() != params.in_channels {
        return Err(dim_err!(
            "conv2d expects {} input channels, got {s}",
            params.in_channels
        ));
    }
    if w.shape() != params.weight_shape() {
        return Err(dim_err!(
            "conv2d weight shape {} does not match expected {}",
            w.shape(),
            params.weight_shape()
        ));
    }
    if let Some(b) = b {
        if b.numel() != params.out_channels {
            return Err(dim_err!(
                "conv2d bias has {} elements, expected {}",
                b.numel(),
                params.out_channels
            ));
        }
    }
    let g = geometry(s, params)?;
    let groups = params.groups;
    let cout_g = params.out_channels / groups;
    let k = g.c * g.kh * g.kw;
    let p = g.ho * g.wo;
    let out_shape = Shape([s.n(), params.out_channels, g.ho, g.wo]);
    let mut out = vec![T::zero(); out_shape.numel()];
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); k * p]
    };
    let in_plane = g.c * g.h * g.w;
    for n in 0..s.n() {
        for grp in 0..groups {
            let xs = &x.data()[(n * groups + grp) * in_plane..(n * groups + grp + 1) * in_plane];
            let ws = &w.data()[grp * cout_g * k..(grp + 1) * cout_g * k];
            let os = &mut out[(n * groups + grp) * cout_g * p..(n * groups + grp + 1) * cout_g * p];
            let cols: &[T] = if g.is_pointwise() {
                xs
            } else {
                im2col(xs, &g, &mut col);
                &col
            };
            T::gemm(cout_g, k, p, T::one(), ws, (k, 1), cols, (p, 1), T::zero(), os, (p, 1));
        }
        if let Some(b) = b {
            for co in 0..params.out_channels {
                let bias = b.data()[co];
                let base = (n * params.out_channels + co) * p;
                out[base..base + p].iter_mut().for_each(|v| *v += bias);
            }
        }
    }
    Tensor::new(out_shape, out)
}

/// Returns `(dx, dw, db)`; `dx` is empty when `need_dx` is false.
pub(crate) fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    params: &ConvParams,
    dy: &[T],
    need_dx: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let s = x.shape();
    let g = geometry(s, params).expect("geometry validated in forward");
    let groups = params.groups;
    let cout_g = params.out_channels / groups;
    let k = g.c * g.kh * g.kw;
    let p = g.ho * g.wo;
    let in_plane = g.c * g.h * g.w;
    let mut dx = if need_dx {
        vec![T::zero(); x.numel()]
    } else {
        Vec::new()
    };
    let mut dw = vec![T::zero(); w.numel()];
    let mut db = vec![T::zero(); params.out_channels];
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); k * p]
    };
    let mut dcol = if g.is_pointwise() || !need_dx {
        Vec::new()
    } else {
        vec![T::zero(); k * p]
    };
    for n in 0..s.n() {
        for grp in 0..groups {
            let xs = &x.data()[(n * groups + grp) * in_plane..(n * groups + grp + 1) * in_plane];
            let ws = &w.data()[grp * cout_g * k..(grp + 1) * cout_g * k];
            let dys = &dy[(n * groups + grp) * cout_g * p..(n * groups + grp + 1) * cout_g * p];
            let dws = &mut dw[grp * cout_g * k..(grp + 1) * cout_g * k];
            let cols: &[T] = if g.is_pointwise() {
                xs
            } else {
                im2col(xs, &g, &mut col);
                &col
            };
            // dW += dY · colᵀ
            T::gemm(cout_g, p, k, T::one(), dys, (p, 1), cols, (1, p), T::one(), dws, (k, 1));
            if need_dx {
                let dxs = &mut dx[(n * groups + grp) * in_plane..(n * groups + grp + 1) * in_plane];
                if g.is_pointwise() {
                    T::gemm(k, cout_g, p, T::one(), ws, (1, k), dys, (p, 1), T::one(), dxs, (p, 1));
                } else {
                    T::gemm(
                        k,
                        cout_g,
                        p,
                        T::one(),
                        ws,
                        (1, k),
                        dys,
                        (p, 1),
                        T::zero(),
                        &mut dcol,
                        (p, 1),
                    );
                    col2im(&dcol, &g, dxs);
                }
            }
        }
        for co in 0..params.out_channels {
            let base = (n * params.out_channels + co) * p;
            db[co] += dy[base..base + p].iter().copied().sum::<T>();
        }
    }
    (dx, dw, db)
}

pub(crate) fn depthwise_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    kernel: (usize, usize),
) -> Result<Tensor<T>> {
    let (ph, pw) = same_padding(kernel)?;
    let s = x.shape();
    let (kh, kw) = kernel;
    if w.shape() != Shape([s.c(), 1, kh, kw]) {
        return Err(dim_err!(
            "depthwise weight shape {} does not match {}x1x{kh}x{kw}",
            w.shape(),
            s.c()
        ));
    }
    if let Some(b) = b {
        if b.numel() != s.c() {
            return Err(dim_err!(
                "depthwise bias has {} elements, expected {}",
                b.numel(),
                s.c()
            ));
        }
    }
    let (h, wd) = (s.h(), s.w());
    let mut out = vec![T::zero(); s.numel()];
    for n in 0..s.n() {
        for c in 0..s.c() {
            let base = (n * s.c() + c) * h * wd;
            let xs = &x.data()[base..base + h * wd];
            let ker = &w.data()[c * kh * kw..(c + 1) * kh * kw];
            let bias = b.map_or(T::zero(), |b| b.data()[c]);
            let os = &mut out[base..base + h * wd];
            for oy in 0..h {
                for ox in 0..wd {
                    let mut acc = bias;
                    for ky in 0..kh {
                        let iy = (oy + ky) as isize - ph as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = &xs[iy as usize * wd..(iy as usize + 1) * wd];
                        for kx in 0..kw {
                            let ix = (ox + kx) as isize - pw as isize;
                            if ix >= 0 && (ix as usize) < wd {
                                acc += ker[ky * kw + kx] * row[ix as usize];
                            }
                        }
                    }
                    os[oy * wd + ox] = acc;
                }
            }
        }
    }
    Tensor::new(s, out)
}

pub(crate) fn depthwise_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    kernel: (usize, usize),
    dy: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (ph, pw) = (kernel.0 / 2, kernel.1 / 2);
    let (kh, kw) = kernel;
    let s = x.shape();
    let (h, wd) = (s.h(), s.w());
    let mut dx = vec![T::zero(); x.numel()];
    let mut dw = vec![T::zero(); w.numel()];
    let mut db = vec![T::zero(); s.c()];
    for n in 0..s.n() {
        for c in 0..s.c() {
            let base = (n * s.c() + c) * h * wd;
            let xs = &x.data()[base..base + h * wd];
            let ker = &w.data()[c * kh * kw..(c + 1) * kh * kw];
            let dys = &dy[base..base + h * wd];
            let dxs = &mut dx[base..base + h * wd];
            let dws = &mut dw[c * kh * kw..(c + 1) * kh * kw];
            db[c] += dys.iter().copied().sum::<T>();
            for oy in 0..h {
                for ox in 0..wd {
                    let d = dys[oy * wd + ox];
                    for ky in 0..kh {
                        let iy = (oy + ky) as isize - ph as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let iy = iy as usize;
                        for kx in 0..kw {
                            let ix = (ox + kx) as isize - pw as isize;
                            if ix >= 0 && (ix as usize) < wd {
                                let ix = ix as usize;
                                dws[ky * kw + kx] += d * xs[iy * wd + ix];
                                dxs[iy * wd + ix] += d * ker[ky * kw + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

impl<T: Real> Tape<T> {
    /// Zero-padded grouped 2-D convolution.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, params: &ConvParams) -> Result<Var> {
        if params.has_bias != bias.is_some() {
            return Err(cfg_err!(
                "conv2d has_bias={} but bias {} supplied",
                params.has_bias,
                if bias.is_some() { "was" } else { "was not" }
            ));
        }
        let out = conv2d_forward(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            params,
        )?;
        Ok(self.push(
            out,
            Op::Conv {
                input,
                weight,
                bias,
                params: *params,
            },
        ))
    }

    /// Per-channel "same"-padded convolution; weight is `(C, 1, kh, kw)`.
    /// Strip kernels (`1×k`, `k×1`) are supported.
    pub fn depthwise_conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        kernel: (usize, usize),
    ) -> Result<Var> {
        let out = depthwise_forward(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            kernel,
        )?;
        Ok(self.push(
            out,
            Op::Depthwise {
                input,
                weight,
                bias,
                kernel,
            },
        ))
    }
}
