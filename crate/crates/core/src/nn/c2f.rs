use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{expect_channels, Cbs, Conv, Ema, EmaConfig, Forward, PConv, PConvConfig, Weights};
use crate::error::{cfg_err, Result};
use crate::tensor::{ConvParams, Real, Var};

/// Which bottleneck a C2F chains.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum C2fVariant {
    #[default]
    Original,
    FasterEma,
}

/// Two 3×3 CBS with a residual add when `shortcut` is set and widths match.
#[derive(Clone, Debug, PartialEq)]
pub struct Bottleneck {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub shortcut: bool,
}

impl Bottleneck {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, shortcut: bool) -> Self {
        Bottleneck {
            name: name.into(),
            cin,
            cout,
            shortcut,
        }
    }

    fn cv1(&self) -> Cbs {
        Cbs::square(format!("{}.cv1", self.name), self.cin, self.cout, 3, 1)
    }

    fn cv2(&self) -> Cbs {
        Cbs::square(format!("{}.cv2", self.name), self.cout, self.cout, 3, 1)
    }

    pub fn has_residual(&self) -> bool {
        self.shortcut && self.cin == self.cout
    }

    pub fn param_count(&self) -> usize {
        let (i, o) = (self.cin, self.cout);
        9 * i * o + 2 * o + 9 * o * o + 2 * o
    }

    pub fn init<T: Real>(&self, w: &mut Weights<T>, rng: &mut (impl Rng + ?Sized)) -> Result<()> {
        self.cv1().init(w, rng)?;
        self.cv2().init(w, rng)
    }

    pub fn forward<T: Real>(&self, f: &mut Forward<T>, x: Var) -> Result<Var> {
        let y = self.cv1().forward(f, x)?;
        let y = self.cv2().forward(f, y)?;
        if self.has_residual() {
            f.tape.add(x, y)
        } else {
            Ok(y)
        }
    }
}

/// PConv → CBS 1×1 (`d → 2d`) → conv 1×1 (`2d → d`) → EMA, plus an identity
/// residual when `shortcut` is set.
#[derive(Clone, Debug, PartialEq)]
pub struct FasterEmaBottleneck {
    pub name: String,
    pub channels: usize,
    pub shortcut: bool,
    pub pconv: PConvConfig,
    pub ema: EmaConfig,
}

impl FasterEmaBottleneck {
    pub fn new(name: impl Into<String>, channels: usize, shortcut: bool) -> Self {
        FasterEmaBottleneck {
            name: name.into(),
            channels,
            shortcut,
            pconv: PConvConfig::new(channels),
            ema: EmaConfig::new(channels),
        }
    }

    fn pconv_block(&self) -> PConv {
        PConv::new(format!("{}.pconv", self.name), self.pconv)
    }

    fn expand(&self) -> Cbs {
        Cbs::square(format!("{}.expand", self.name), self.channels, 2 * self.channels, 1, 1)
    }

    fn reduce(&self) -> Conv {
        Conv::new(
            format!("{}.reduce", self.name),
            ConvParams::new(2 * self.channels, self.channels, 1),
        )
    }

    fn ema_block(&self) -> Ema {
        Ema::new(format!("{}.ema", self.name), self.ema)
    }

    pub fn param_count(&self) -> usize {
        let d = self.channels;
        let cp = self.pconv.convolved();
        let k = self.pconv.kernel;
        let g = self.ema.group_channels();
        let pconv = k * k * cp * cp;
        let expand = 2 * d * d + 2 * (2 * d);
        let reduce = 2 * d * d;
        let ema = (g * g + g) + (9 * g * g + g) + 2 * g;
        pconv + expand + reduce + ema
    }

    pub fn init<T: Real>(&self, w: &mut Weights<T>, rng: &mut (impl Rng + ?Sized)) -> Result<()> {
        self.pconv_block().init(w, rng)?;
        self.expand().init(w, rng)?;
        self.reduce().init(w, rng)?;
        self.ema_block().init(w, rng)
    }

    pub fn forward<T: Real>(&self, f: &mut Forward<T>, x: Var) -> Result<Var> {
        expect_channels(f.tape.shape(x), self.channels, "Faster-EMA bottleneck")?;
        let y = self.pconv_block().forward(f, x)?;
        let y = self.expand().forward(f, y)?;
        let y = self.reduce().forward(f, y)?;
        let y = self.ema_block().forward(f, y)?;
        if self.shortcut {
            f.tape.add(x, y)
        } else {
            Ok(y)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum BottleneckKind {
    Original(Bottleneck),
    FasterEma(FasterEmaBottleneck),
}

impl BottleneckKind {
    pub fn param_count(&self) -> usize {
        match self {
            BottleneckKind::Original(b) => b.param_count(),
            BottleneckKind::FasterEma(b) => b.param_count(),
        }
    }

    pub fn init<T: Real>(&self, w: &mut Weights<T>, rng: &mut (impl Rng + ?Sized)) -> Result<()> {
        match self {
            BottleneckKind::Original(b) => b.init(w, rng),
            BottleneckKind::FasterEma(b) => b.init(w, rng),
        }
    }

    pub fn forward<T: Real>(&self, f: &mut Forward<T>, x: Var) -> Result<Var> {
        match self {
            BottleneckKind::Original(b) => b.forward(f, x),
            BottleneckKind::FasterEma(b) => b.forward(f, x),
        }
    }
}

/// CBS 1×1 to `2c`, split in halves, `n` bottlenecks chained on the second
/// half, concat of all `(2 + n)·c` channels, CBS 1×1 to the output width.
#[derive(Clone, Debug, PartialEq)]
pub struct C2f {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub n: usize,
    pub shortcut: bool,
    pub variant: C2fVariant,
}

impl C2f {
    pub fn new(
        name: impl Into<String>,
        cin: usize,
        cout: usize,
        n: usize,
        shortcut: bool,
        variant: C2fVariant,
    ) -> Self {
        C2f {
            name: name.into(),
            cin,
            cout,
            n,
            shortcut,
            variant,
        }
    }

    pub fn hidden(&self) -> usize {
        self.cout / 2
    }

    pub fn concat_channels(&self) -> usize {
        (2 + self.n) * self.hidden()
    }

    fn validate(&self) -> Result<()> {
        if self.cout < 2 || !self.cout.is_multiple_of(2) {
            return Err(cfg_err!("C2F output width must be even, got {}", self.cout));
        }
        Ok(())
    }

    fn cv1(&self) -> Cbs {
        Cbs::square(format!("{}.cv1", self.name), self.cin, 2 * self.hidden(), 1, 1)
    }

    fn cv2(&self) -> Cbs {
        Cbs::square(format!("{}.cv2", self.name), self.concat_channels(), self.cout, 1, 1)
    }

    pub fn blocks(&self) -> Vec<BottleneckKind> {
        let c = self.hidden();
        (0..self.n)
            .map(|i| {
                let name = format!("{}.m{i}", self.name);
                match self.variant {
                    C2fVariant::Original => BottleneckKind::Original(Bottleneck::new(name, c, c, self.shortcut)),
                    C2fVariant::FasterEma => {
                        BottleneckKind::FasterEma(FasterEmaBottleneck::new(name, c, self.shortcut))
                    }
                }
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        let c = self.hidden();
        let cv1 = self.cin * 2 * c + 2 * (2 * c);
        let cv2 = self.concat_channels() * self.cout + 2 * self.cout;
        cv1 + cv2 + self.blocks().iter().map(BottleneckKind::param_count).sum::<usize>()
    }

    pub fn init<T: Real>(&self, w: &mut Weights<T>, rng: &mut (impl Rng + ?Sized)) -> Result<()> {
        self.validate()?;
        self.cv1().init(w, rng)?;
        for b in self.blocks() {
            b.init(w, rng)?;
        }
        self.cv2().init(w, rng)
    }

    pub fn forward<T: Real>(&self, f: &mut Forward<T>, x: Var) -> Result<Var> {
        self.validate()?;
        expect_channels(f.tape.shape(x), self.cin, "C2F")?;
        let c = self.hidden();
        let y = self.cv1().forward(f, x)?;
        let mut parts = f.tape.split_channels(y, &[c, c])?;
        let mut last = parts[1];
        for b in self.blocks() {
            last = b.forward(f, last)?;
            parts.push(last);
        }
        let cat = f.tape.concat_channels(&parts)?;
        self.cv2().forward(f, cat)
    }
}
