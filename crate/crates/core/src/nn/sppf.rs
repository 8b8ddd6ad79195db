use rand::Rng;

use super::{expect_channels, Cbs, Cpca, CpcaConfig, Forward, Weights};
use crate::error::Result;
use crate::tensor::{PoolKind, Real, Var};

/// CBS 1×1 halving, three serial `k×k` stride-1 max pools, concat of the four
/// stages, optional CPCA on the concat, CBS 1×1 to the output width.
#[derive(Clone, Debug, PartialEq)]
pub struct Sppf {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub cpca: bool,
}

impl Sppf {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, cpca: bool) -> Self {
        Sppf {
            name: name.into(),
            cin,
            cout,
            kernel: 5,
            cpca,
        }
    }

    pub fn hidden(&self) -> usize {
        self.cin / 2
    }

    pub fn concat_channels(&self) -> usize {
        4 * self.hidden()
    }

    fn cv1(&self) -> Cbs {
        Cbs::square(format!("{}.cv1", self.name), self.cin, self.hidden(), 1, 1)
    }

    fn cv2(&self) -> Cbs {
        Cbs::square(format!("{}.cv2", self.name), self.concat_channels(), self.cout, 1, 1)
    }

    pub fn attention(&self) -> Option<Cpca> {
        self.cpca
            .then(|| Cpca::new(format!("{}.cpca", self.name), CpcaConfig::new(self.concat_channels())))
    }

    pub fn param_count(&self) -> usize {
        let h = self.hidden();
        let cv1 = self.cin * h + 2 * h;
        let cv2 = self.concat_channels() * self.cout + 2 * self.cout;
        cv1 + cv2 + self.attention().map_or(0, |a| a.cfg.param_count())
    }

    pub fn init<T: Real>(&self, w: &mut Weights<T>, rng: &mut (impl Rng + ?Sized)) -> Result<()> {
        self.cv1().init(w, rng)?;
        if let Some(a) = self.attention() {
            a.init(w, rng)?;
        }
        self.cv2().init(w, rng)
    }

    /// The concatenated pooling pyramid, before attention and projection.
    pub fn pyramid<T: Real>(&self, f: &mut Forward<T>, x: Var) -> Result<Var> {
        expect_channels(f.tape.shape(x), self.cin, "SPPF")?;
        let k = self.kernel;
        let y0 = self.cv1().forward(f, x)?;
        let y1 = f.tape.pool2d(y0, PoolKind::Max, k, 1, k / 2)?;
        let y2 = f.tape.pool2d(y1, PoolKind::Max, k, 1, k / 2)?;
        let y3 = f.tape.pool2d(y2, PoolKind::Max, k, 1, k / 2)?;
        f.tape.concat_channels(&[y0, y1, y2, y3])
    }

    pub fn forward<T: Real>(&self, f: &mut Forward<T>, x: Var) -> Result<Var> {
        let mut y = self.pyramid(f, x)?;
        if let Some(a) = self.attention() {
            y = a.forward(f, y)?;
        }
        self.cv2().forward(f, y)
    }
}
