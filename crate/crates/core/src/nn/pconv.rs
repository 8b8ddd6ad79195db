use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{expect_channels, Conv, Forward, Weights};
use crate::error::{cfg_err, Result};
use crate::tensor::{ConvParams, Real, Var};

/// Which contiguous channel slice a partial convolution convolves.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    #[default]
    First,
    Last,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PConvConfig {
    pub channels: usize,
    pub ratio: f64,
    pub kernel: usize,
    pub partition: Partition,
}

impl PConvConfig {
    /// Ratio 1/4, 3×3 kernel, first slice.
    pub fn new(channels: usize) -> Self {
        PConvConfig {
            channels,
            ratio: 0.25,
            kernel: 3,
            partition: Partition::First,
        }
    }

    pub fn with_ratio(mut self, ratio: f64) -> Self {
        self.ratio = ratio;
        self
    }

    pub fn with_partition(mut self, partition: Partition) -> Self {
        self.partition = partition;
        self
    }

    /// Number of convolved channels, `round(c · r)`.
    pub fn convolved(&self) -> usize {
        (self.channels as f64 * self.ratio).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let cp = self.convolved();
        if cp < 1 || cp > self.channels {
            return Err(cfg_err!(
                "partial conv needs 1 <= cp <= c, got cp={cp} for c={} r={}",
                self.channels,
                self.ratio
            ));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(cfg_err!("partial conv kernel must be odd, got {}", self.kernel));
        }
        Ok(())
    }

    /// Start of the convolved slice.
    pub fn slice_start(&self) -> usize {
        match self.partition {
            Partition::First => 0,
            Partition::Last => self.channels - self.convolved(),
        }
    }
}

/// Partial convolution: a `k×k` convolution over `cp` contiguous channels,
/// the remaining channels pass through untouched.
#[derive(Clone, Debug, PartialEq)]
pub struct PConv {
    pub name: String,
    pub cfg: PConvConfig,
}

impl PConv {
    pub fn new(name: impl Into<String>, cfg: PConvConfig) -> Self {
        PConv { name: name.into(), cfg }
    }

    fn conv(&self) -> Conv {
        let cp = self.cfg.convolved();
        Conv::new(format!("{}.conv", self.name), ConvParams::new(cp, cp, self.cfg.kernel))
    }

    pub fn init<T: Real>(&self, w: &mut Weights<T>, rng: &mut (impl Rng + ?Sized)) -> Result<()> {
        self.cfg.validate()?;
        self.conv().init(w, rng)
    }

    pub fn forward<T: Real>(&self, f: &mut Forward<T>, x: Var) -> Result<Var> {
        self.cfg.validate()?;
        expect_channels(f.tape.shape(x), self.cfg.channels, "partial conv")?;
        let c = self.cfg.channels;
        let cp = self.cfg.convolved();
        if cp == c {
            return self.conv().forward(f, x);
        }
        match self.cfg.partition {
            Partition::First => {
                let parts = f.tape.split_channels(x, &[cp, c - cp])?;
                let y = self.conv().forward(f, parts[0])?;
                f.tape.concat_channels(&[y, parts[1]])
            }
            Partition::Last => {
                let parts = f.tape.split_channels(x, &[c - cp, cp])?;
                let y = self.conv().forward(f, parts[1])?;
                f.tape.concat_channels(&[parts[0], y])
            }
        }
    }
}
