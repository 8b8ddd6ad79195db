use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{expect_channels, Conv, Forward, Weights};
use crate::error::{cfg_err, Result};
use crate::tensor::{Axis, ConvParams, Real, Shape, Tensor, Var};

const GN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmaConfig {
    pub channels: usize,
    pub groups: usize,
}

impl EmaConfig {
    pub fn new(channels: usize) -> Self {
        EmaConfig { channels, groups: 4 }
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 || !self.channels.is_multiple_of(self.groups) {
            return Err(cfg_err!(
                "EMA channels {} not divisible by groups {}",
                self.channels,
                self.groups
            ));
        }
        Ok(())
    }

    pub fn group_channels(&self) -> usize {
        self.channels / self.groups
    }
}

/// Efficient multi-scale attention.
///
/// Channels are folded into `groups` sub-features (moved to the batch axis).
/// Per group:
/// 1. means along W and along H go through a shared 1×1 conv and gate the
///    group features with two sigmoids, followed by per-channel group norm;
/// 2. a parallel 3×3 conv path;
/// 3. each path's globally pooled descriptor is softmax-normalised over the
///    group's channels and used to weight the *other* path's features; the sum
///    of both channel-weighted maps is a `1×H×W` logit map whose sigmoid
///    rescales the group.
#[derive(Clone, Debug, PartialEq)]
pub struct Ema {
    pub name: String,
    pub cfg: EmaConfig,
}

/// Intermediate values of one EMA pass, exposed for inspection in tests.
pub struct EmaTrace {
    pub output: Var,
    pub descriptor_softmax: [Var; 2],
    pub pooled_h: Var,
    pub pooled_w: Var,
}

impl Ema {
    pub fn new(name: impl Into<String>, cfg: EmaConfig) -> Self {
        Ema { name: name.into(), cfg }
    }

    fn conv1x1(&self) -> Conv {
        let c = self.cfg.group_channels();
        Conv::new(format!("{}.conv1x1", self.name), ConvParams::new(c, c, 1).bias(true))
    }

    fn conv3x3(&self) -> Conv {
        let c = self.cfg.group_channels();
        Conv::new(format!("{}.conv3x3", self.name), ConvParams::new(c, c, 3).bias(true))
    }

    pub fn init<T: Real>(&self, w: &mut Weights<T>, rng: &mut (impl Rng + ?Sized)) -> Result<()> {
        self.cfg.validate()?;
        self.conv1x1().init(w, rng)?;
        self.conv3x3().init(w, rng)?;
        let s = Shape([1, self.cfg.group_channels(), 1, 1]);
        w.add_param(format!("{}.gn.gamma", self.name), Tensor::ones(s))?;
        w.add_param(format!("{}.gn.beta", self.name), Tensor::zeros(s))?;
        Ok(())
    }

    pub fn forward<T: Real>(&self, f: &mut Forward<T>, x: Var) -> Result<Var> {
        Ok(self.forward_traced(f, x)?.output)
    }

    pub fn forward_traced<T: Real>(&self, f: &mut Forward<T>, x: Var) -> Result<EmaTrace> {
        self.cfg.validate()?;
        let s = f.tape.shape(x);
        expect_channels(s, self.cfg.channels, "EMA")?;
        let g = self.cfg.groups;
        let cg = self.cfg.group_channels();
        let gx = f.tape.reshape(x, [s.n() * g, cg, s.h(), s.w()])?;

        // Coordinate branch: 1-D means, shared 1×1 conv, sigmoid gates.
        let pooled_h = f.tape.mean_over(gx, Axis::Width);
        let pooled_w = f.tape.mean_over(gx, Axis::Height);
        let conv1 = self.conv1x1();
        let gate_h = conv1.forward(f, pooled_h)?;
        let gate_w = conv1.forward(f, pooled_w)?;
        let gate_h = f.tape.sigmoid(gate_h);
        let gate_w = f.tape.sigmoid(gate_w);
        let gated = f.tape.mul(gx, gate_h)?;
        let gated = f.tape.mul(gated, gate_w)?;
        let gamma = f.param(&format!("{}.gn.gamma", self.name))?;
        let beta = f.param(&format!("{}.gn.beta", self.name))?;
        let x1 = f.tape.instance_norm(gated, gamma, beta, T::cast(GN_EPS))?;

        // Local branch.
        let x2 = self.conv3x3().forward(f, gx)?;

        // Cross-spatial aggregation.
        let d1 = f.tape.mean_over(x1, Axis::Both);
        let d1 = f.tape.softmax_channels(d1);
        let d2 = f.tape.mean_over(x2, Axis::Both);
        let d2 = f.tape.softmax_channels(d2);
        let a = f.tape.mul(d1, x2)?;
        let a = f.tape.sum_channels(a);
        let b = f.tape.mul(d2, x1)?;
        let b = f.tape.sum_channels(b);
        let logits = f.tape.add(a, b)?;
        let weights = f.tape.sigmoid(logits);
        let y = f.tape.mul(gx, weights)?;
        let output = f.tape.reshape(y, s.0)?;
        Ok(EmaTrace {
            output,
            descriptor_softmax: [d1, d2],
            pooled_h,
            pooled_w,
        })
    }
}
