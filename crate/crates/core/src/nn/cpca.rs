use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{expect_channels, Conv, DepthwiseConv, Forward, Weights};
use crate::error::{cfg_err, Result};
use crate::tensor::{Axis, ConvParams, Real, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CpcaConfig {
    pub channels: usize,
    pub reduction: usize,
    pub base_kernel: usize,
    pub strip_kernels: Vec<usize>,
}

impl CpcaConfig {
    /// Reduction 16, 5×5 base depthwise kernel, strips {7, 11, 21}.
    pub fn new(channels: usize) -> Self {
        CpcaConfig {
            channels,
            reduction: 16,
            base_kernel: 5,
            strip_kernels: vec![7, 11, 21],
        }
    }

    /// Hidden width of the shared MLP, `max(C / r, 4)`.
    pub fn hidden(&self) -> usize {
        (self.channels / self.reduction).max(4)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.reduction == 0 {
            return Err(cfg_err!("CPCA channels and reduction must be positive"));
        }
        if self.strip_kernels.len() != 3 {
            return Err(cfg_err!(
                "CPCA uses exactly three strip branches besides the identity, got {}",
                self.strip_kernels.len()
            ));
        }
        if self.base_kernel.is_multiple_of(2) || self.strip_kernels.iter().any(|k| k % 2 == 0) {
            return Err(cfg_err!("CPCA kernels must be odd"));
        }
        Ok(())
    }

    /// Exact number of trainable scalars of one CPCA block.
    pub fn param_count(&self) -> usize {
        let c = self.channels;
        let h = self.hidden();
        let mlp = c * h + h + h * c + c;
        let base = c * self.base_kernel * self.base_kernel + c;
        let strips: usize = self.strip_kernels.iter().map(|k| 2 * (c * k + c)).sum();
        let mix = c * c + c;
        mlp + base + strips + mix
    }
}

/// Channel-prior convolutional attention.
///
/// `F_c = CA(F) ⊗ F`, `F̂ = SA(F_c) ⊗ F_c`, with
/// `CA(F) = σ(MLP(avg(F)) + MLP(max(F)))` and
/// `SA(F) = Conv1×1(Σ_i Branch_i(DwConv5×5(F)))`, where branch 0 is the
/// identity and branches 1..3 are `1×k` then `k×1` depthwise strip pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct Cpca {
    pub name: String,
    pub cfg: CpcaConfig,
}

impl Cpca {
    pub fn new(name: impl Into<String>, cfg: CpcaConfig) -> Self {
        Cpca { name: name.into(), cfg }
    }

    fn fc1(&self) -> Conv {
        Conv::new(
            format!("{}.ca.fc1", self.name),
            ConvParams::new(self.cfg.channels, self.cfg.hidden(), 1).bias(true),
        )
    }

    fn fc2(&self) -> Conv {
        Conv::new(
            format!("{}.ca.fc2", self.name),
            ConvParams::new(self.cfg.hidden(), self.cfg.channels, 1).bias(true),
        )
    }

    fn base(&self) -> DepthwiseConv {
        let k = self.cfg.base_kernel;
        DepthwiseConv::new(format!("{}.sa.dw{k}x{k}", self.name), self.cfg.channels, (k, k), true)
    }

    fn strips(&self) -> Vec<(DepthwiseConv, DepthwiseConv)> {
        let c = self.cfg.channels;
        self.cfg
            .strip_kernels
            .iter()
            .map(|&k| {
                (
                    DepthwiseConv::new(format!("{}.sa.dw1x{k}", self.name), c, (1, k), true),
                    DepthwiseConv::new(format!("{}.sa.dw{k}x1", self.name), c, (k, 1), true),
                )
            })
            .collect()
    }

    fn mix(&self) -> Conv {
        let c = self.cfg.channels;
        Conv::new(format!("{}.sa.mix", self.name), ConvParams::new(c, c, 1).bias(true))
    }

    pub fn init<T: Real>(&self, w: &mut Weights<T>, rng: &mut (impl Rng + ?Sized)) -> Result<()> {
        self.cfg.validate()?;
        self.fc1().init(w, rng)?;
        self.fc2().init(w, rng)?;
        self.base().init(w, rng)?;
        for (a, b) in self.strips() {
            a.init(w, rng)?;
            b.init(w, rng)?;
        }
        self.mix().init(w, rng)
    }

    /// Channel attention map `(N, C, 1, 1)`, values in (0, 1).
    pub fn channel_attention<T: Real>(&self, f: &mut Forward<T>, x: Var) -> Result<Var> {
        expect_channels(f.tape.shape(x), self.cfg.channels, "CPCA")?;
        let avg = f.tape.mean_over(x, Axis::Both);
        let max = f.tape.global_max_pool(x);
        let a = self.mlp(f, avg)?;
        let m = self.mlp(f, max)?;
        let logits = f.tape.add(a, m)?;
        Ok(f.tape.sigmoid(logits))
    }

    fn mlp<T: Real>(&self, f: &mut Forward<T>, v: Var) -> Result<Var> {
        let h = self.fc1().forward(f, v)?;
        let h = f.tape.relu(h);
        self.fc2().forward(f, h)
    }

    /// Spatial attention map with the input's shape.
    pub fn spatial_attention<T: Real>(&self, f: &mut Forward<T>, x: Var) -> Result<Var> {
        expect_channels(f.tape.shape(x), self.cfg.channels, "CPCA")?;
        let base = self.base().forward(f, x)?;
        let mut acc = base;
        for (row, col) in self.strips() {
            let y = row.forward(f, base)?;
            let y = col.forward(f, y)?;
            acc = f.tape.add(acc, y)?;
        }
        self.mix().forward(f, acc)
    }

    pub fn forward<T: Real>(&self, f: &mut Forward<T>, x: Var) -> Result<Var> {
        self.cfg.validate()?;
        let ca = self.channel_attention(f, x)?;
        let fc = f.tape.mul(x, ca)?;
        let sa = self.spatial_attention(f, fc)?;
        f.tape.mul(sa, fc)
    }

    /// Sets weights so that `CA ≡ 1` and `SA ≡ 1` exactly, making the block
    /// the identity.
    pub fn set_identity<T: Real>(&self, w: &mut Weights<T>) -> Result<()> {
        let zero = |t: &mut Tensor<T>| t.data_mut().iter_mut().for_each(|v| *v = T::zero());
        let fill = |t: &mut Tensor<T>, x: f64| t.data_mut().iter_mut().for_each(|v| *v = T::cast(x));
        zero(w.param_mut(&format!("{}.ca.fc1.weight", self.name))?);
        zero(w.param_mut(&format!("{}.ca.fc1.bias", self.name))?);
        zero(w.param_mut(&format!("{}.ca.fc2.weight", self.name))?);
        // σ(2·40) rounds to exactly 1 in both f32 and f64.
        fill(w.param_mut(&format!("{}.ca.fc2.bias", self.name))?, 40.0);
        zero(w.param_mut(&format!("{}.sa.mix.weight", self.name))?);
        fill(w.param_mut(&format!("{}.sa.mix.bias", self.name))?, 1.0);
        Ok(())
    }
}
