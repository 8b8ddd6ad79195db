use rand::Rng;

use super::head::{Head, HeadOutput, LevelOutput, LevelVars};
use super::{LayerKind, LayerSpec, ModelGraph};
use crate::error::{cfg_err, dim_err, Result};
use crate::nn::{C2f, C2fVariant, Cbs, DwSeparable, Forward, Mode, Sppf, Weights};
use crate::tensor::{Real, Shape, Tape, Tensor, Var};

/// Fast normalised fusion `Σ relu(ω_i)·x_i / (Σ relu(ω_j) + ε)`.
///
/// `raw` holds the raw weights as a `(1, k, 1, 1)` tensor.
pub fn bifpn_fuse<T: Real>(tape: &mut Tape<T>, inputs: &[Var], raw: Var, eps: T) -> Result<Var> {
    if inputs.len() < 2 {
        return Err(cfg_err!(
            "weighted fusion needs at least 2 inputs, got {}",
            inputs.len()
        ));
    }
    let rs = tape.shape(raw);
    if rs.0 != [1, inputs.len(), 1, 1] {
        return Err(dim_err!("fusion weights must be 1x{}x1x1, got {rs}", inputs.len()));
    }
    let shape = tape.shape(inputs[0]);
    if inputs.iter().any(|&x| tape.shape(x) != shape) {
        return Err(dim_err!("fusion inputs must share one shape"));
    }
    let w = tape.relu(raw);
    let mut acc = None;
    for (i, &x) in inputs.iter().enumerate() {
        let wi = tape.slice_channels(w, i, 1)?;
        let term = tape.mul(x, wi)?;
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
    }
    let total = tape.sum_channels(w);
    let eps = tape.constant(Tensor::scalar(eps));
    let denom = tape.add(total, eps)?;
    tape.div(acc.expect("at least two inputs"), denom)
}

/// Executable model over a validated graph.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub graph: ModelGraph,
}

fn fuse_conv(l: &LayerSpec, channels: usize) -> DwSeparable {
    DwSeparable::new(format!("{}.conv", l.name), channels, channels, 3)
}

fn head_of(l: &LayerSpec) -> Option<Head> {
    match &l.kind {
        LayerKind::Head {
            channels,
            strides,
            num_classes,
        } => Some(Head::new(
            l.name.clone(),
            channels.clone(),
            strides.clone(),
            *num_classes,
        )),
        _ => None,
    }
}

fn c2f_of(l: &LayerSpec) -> Option<C2f> {
    match l.kind {
        LayerKind::C2f { cin, cout, n, shortcut } => {
            Some(C2f::new(l.name.clone(), cin, cout, n, shortcut, C2fVariant::Original))
        }
        LayerKind::C2fFasterEma { cin, cout, n, shortcut } => {
            Some(C2f::new(l.name.clone(), cin, cout, n, shortcut, C2fVariant::FasterEma))
        }
        _ => None,
    }
}

fn sppf_of(l: &LayerSpec) -> Option<Sppf> {
    match l.kind {
        LayerKind::Sppf { cin, cout } => Some(Sppf::new(l.name.clone(), cin, cout, false)),
        LayerKind::SppfCpca { cin, cout } => Some(Sppf::new(l.name.clone(), cin, cout, true)),
        _ => None,
    }
}

impl Model {
    pub fn new(graph: ModelGraph) -> Result<Self> {
        graph.validate()?;
        Ok(Model { graph })
    }

    pub fn head(&self) -> Result<Head> {
        head_of(self.graph.head()?).ok_or_else(|| cfg_err!("graph has no head"))
    }

    /// Allocates and initialises every weight of the graph.
    pub fn init<T: Real>(&self, rng: &mut (impl Rng + ?Sized)) -> Result<Weights<T>> {
        let mut w = Weights::new();
        for l in &self.graph.layers {
            match &l.kind {
                LayerKind::Input { .. } | LayerKind::Upsample | LayerKind::Downsample | LayerKind::Concat => {}
                LayerKind::Cbs {
                    cin,
                    cout,
                    kernel,
                    stride,
                } => Cbs::square(l.name.clone(), *cin, *cout, *kernel, *stride).init(&mut w, rng)?,
                LayerKind::C2f { .. } | LayerKind::C2fFasterEma { .. } => {
                    c2f_of(l).expect("c2f kind").init(&mut w, rng)?
                }
                LayerKind::Sppf { .. } | LayerKind::SppfCpca { .. } => {
                    sppf_of(l).expect("sppf kind").init(&mut w, rng)?
                }
                LayerKind::Fuse { channels, weights, .. } => {
                    let raw = weights.iter().map(|&v| T::cast(v)).collect();
                    w.add_param(
                        format!("{}.w", l.name),
                        Tensor::new(Shape([1, weights.len(), 1, 1]), raw)?,
                    )?;
                    fuse_conv(l, *channels).init(&mut w, rng)?;
                }
                LayerKind::Head { .. } => head_of(l).expect("head kind").init(&mut w, rng)?,
            }
        }
        Ok(w)
    }

    /// Records a full forward pass and returns the head handles.
    pub fn forward<T: Real>(&self, f: &mut Forward<T>, image: Var) -> Result<Vec<LevelVars>> {
        let s = f.tape.shape(image);
        if !s.h().is_multiple_of(32) || !s.w().is_multiple_of(32) {
            return Err(dim_err!("input extents must be divisible by 32, got {s}"));
        }
        let mut vals: Vec<Option<Var>> = vec![None; self.graph.layers.len()];
        for l in &self.graph.layers {
            let ins: Vec<Var> = l
                .inputs
                .iter()
                .map(|&i| vals[i].ok_or_else(|| cfg_err!("layer {} input {i} not computed", l.name)))
                .collect::<Result<_>>()?;
            let y = match &l.kind {
                LayerKind::Input { channels } => {
                    if s.c() != *channels {
                        return Err(dim_err!("model expects {channels} input channels, got {s}"));
                    }
                    image
                }
                LayerKind::Cbs {
                    cin,
                    cout,
                    kernel,
                    stride,
                } => Cbs::square(l.name.clone(), *cin, *cout, *kernel, *stride).forward(f, ins[0])?,
                LayerKind::C2f { .. } | LayerKind::C2fFasterEma { .. } => {
                    c2f_of(l).expect("c2f kind").forward(f, ins[0])?
                }
                LayerKind::Sppf { .. } | LayerKind::SppfCpca { .. } => {
                    sppf_of(l).expect("sppf kind").forward(f, ins[0])?
                }
                LayerKind::Upsample => f.tape.upsample2x(ins[0]),
                LayerKind::Downsample => f.tape.downsample2x(ins[0])?,
                LayerKind::Concat => f.tape.concat_channels(&ins)?,
                LayerKind::Fuse { channels, eps, .. } => {
                    let raw = f.param(&format!("{}.w", l.name))?;
                    let fused = bifpn_fuse(&mut f.tape, &ins, raw, T::cast(*eps))?;
                    fuse_conv(l, *channels).forward(f, fused)?
                }
                LayerKind::Head { .. } => {
                    return head_of(l).expect("head kind").forward(f, &ins);
                }
            };
            vals[l.id] = Some(y);
        }
        Err(cfg_err!("graph {} has no head", self.graph.name))
    }

    /// Inference-mode forward returning materialised head maps.
    pub fn predict<T: Real>(&self, weights: &Weights<T>, image: &Tensor<T>) -> Result<HeadOutput<T>> {
        let mut f = Forward::new(weights, Mode::Infer);
        let x = f.input(image.clone(), false);
        let levels = self.forward(&mut f, x)?;
        Ok(materialise(&f.tape, &levels))
    }
}

pub(crate) fn materialise<T: Real>(tape: &Tape<T>, levels: &[LevelVars]) -> HeadOutput<T> {
    HeadOutput {
        levels: levels
            .iter()
            .map(|l| LevelOutput {
                cls: tape.value(l.cls).clone(),
                boxes: tape.value(l.boxes).clone(),
                stride: l.stride,
            })
            .collect(),
    }
}

/// Inference-mode forward of `graph` on `image`.
pub fn forward_model<T: Real>(model: &Model, weights: &Weights<T>, image: &Tensor<T>) -> Result<HeadOutput<T>> {
    model.predict(weights, image)
}
