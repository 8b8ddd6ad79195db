use rand::Rng;

use super::{expect_channels, Forward, Weights};
use crate::error::Result;
use crate::tensor::{same_padding, ConvParams, Real, Shape, Tensor, Var};

/// Plain convolution with optional bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub name: String,
    pub params: ConvParams,
}

impl Conv {
    pub fn new(name: impl Into<String>, params: ConvParams) -> Self {
        Conv {
            name: name.into(),
            params,
        }
    }

    pub fn init<T: Real>(&self, w: &mut Weights<T>, rng: &mut (impl Rng + ?Sized)) -> Result<()> {
        self.params.validate()?;
        w.add_kaiming(format!("{}.weight", self.name), self.params.weight_shape(), rng)?;
        if self.params.has_bias {
            w.add_param(
                format!("{}.bias", self.name),
                Tensor::zeros(Shape([1, self.params.out_channels, 1, 1])),
            )?;
        }
        Ok(())
    }

    pub fn forward<T: Real>(&self, f: &mut Forward<T>, x: Var) -> Result<Var> {
        let w = f.param(&format!("{}.weight", self.name))?;
        let b = if self.params.has_bias {
            Some(f.param(&format!("{}.bias", self.name))?)
        } else {
            None
        };
        f.tape.conv2d(x, w, b, &self.params)
    }
}

/// Conv2d → BatchNorm → SiLU.
#[derive(Clone, Debug, PartialEq)]
pub struct Cbs {
    pub name: String,
    pub conv: ConvParams,
}

impl Cbs {
    pub fn new(name: impl Into<String>, conv: ConvParams) -> Self {
        Cbs {
            name: name.into(),
            conv,
        }
    }

    /// `k×k` CBS with "same"-style padding `k / 2` and the given stride.
    pub fn square(name: impl Into<String>, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        Cbs::new(name, ConvParams::new(cin, cout, k).stride(stride))
    }

    pub fn out_channels(&self) -> usize {
        self.conv.out_channels
    }

    pub fn init<T: Real>(&self, w: &mut Weights<T>, rng: &mut (impl Rng + ?Sized)) -> Result<()> {
        Conv::new(format!("{}.conv", self.name), self.conv).init(w, rng)?;
        w.add_batch_norm(&format!("{}.bn", self.name), self.conv.out_channels)
    }

    pub fn forward<T: Real>(&self, f: &mut Forward<T>, x: Var) -> Result<Var> {
        let y = Conv::new(format!("{}.conv", self.name), self.conv).forward(f, x)?;
        let y = f.batch_norm(&format!("{}.bn", self.name), y)?;
        Ok(f.tape.silu(y))
    }
}

/// Per-channel "same"-padded convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthwiseConv {
    pub name: String,
    pub channels: usize,
    pub kernel: (usize, usize),
    pub bias: bool,
}

impl DepthwiseConv {
    pub fn new(name: impl Into<String>, channels: usize, kernel: (usize, usize), bias: bool) -> Self {
        DepthwiseConv {
            name: name.into(),
            channels,
            kernel,
            bias,
        }
    }

    pub fn param_count(&self) -> usize {
        self.channels * self.kernel.0 * self.kernel.1 + if self.bias { self.channels } else { 0 }
    }

    pub fn init<T: Real>(&self, w: &mut Weights<T>, rng: &mut (impl Rng + ?Sized)) -> Result<()> {
        same_padding(self.kernel)?;
        let shape = Shape([self.channels, 1, self.kernel.0, self.kernel.1]);
        w.add_kaiming(format!("{}.weight", self.name), shape, rng)?;
        if self.bias {
            w.add_param(
                format!("{}.bias", self.name),
                Tensor::zeros(Shape([1, self.channels, 1, 1])),
            )?;
        }
        Ok(())
    }

    pub fn forward<T: Real>(&self, f: &mut Forward<T>, x: Var) -> Result<Var> {
        expect_channels(f.tape.shape(x), self.channels, "depthwise conv")?;
        let w = f.param(&format!("{}.weight", self.name))?;
        let b = if self.bias {
            Some(f.param(&format!("{}.bias", self.name))?)
        } else {
            None
        };
        f.tape.depthwise_conv2d(x, w, b, self.kernel)
    }
}

/// Depthwise `k×k` → BN → SiLU → pointwise `1×1` → BN → SiLU.
#[derive(Clone, Debug, PartialEq)]
pub struct DwSeparable {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
}

impl DwSeparable {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, kernel: usize) -> Self {
        DwSeparable {
            name: name.into(),
            cin,
            cout,
            kernel,
        }
    }

    fn depthwise(&self) -> DepthwiseConv {
        DepthwiseConv::new(format!("{}.dw", self.name), self.cin, (self.kernel, self.kernel), false)
    }

    fn pointwise(&self) -> Cbs {
        Cbs::square(format!("{}.pw", self.name), self.cin, self.cout, 1, 1)
    }

    pub fn init<T: Real>(&self, w: &mut Weights<T>, rng: &mut (impl Rng + ?Sized)) -> Result<()> {
        self.depthwise().init(w, rng)?;
        w.add_batch_norm(&format!("{}.dw_bn", self.name), self.cin)?;
        self.pointwise().init(w, rng)
    }

    pub fn forward<T: Real>(&self, f: &mut Forward<T>, x: Var) -> Result<Var> {
        let y = self.depthwise().forward(f, x)?;
        let y = f.batch_norm(&format!("{}.dw_bn", self.name), y)?;
        let y = f.tape.silu(y);
        self.pointwise().forward(f, y)
    }
}
