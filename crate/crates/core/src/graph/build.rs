use serde::{Deserialize, Serialize};

use super::{LayerKind, LayerSpec, ModelGraph, Multipliers, ScaleOutput, FUSE_EPS};
use crate::error::{cfg_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Baseline,
    Pec,
}

impl std::str::FromStr for Variant {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Variant::Baseline),
            "pec" => Ok(Variant::Pec),
            other => Err(cfg_err!("unknown model variant {other:?} (expected baseline|pec)")),
        }
    }
}

/// Width/depth multipliers on the `(64, 128, 256, 512, 1024)` template.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    /// Width 0.5, depth 0.33.
    S,
    /// Width 0.125, depth 0.33: small enough to train on a CPU.
    Toy,
}

impl Scale {
    pub fn multipliers(self) -> Multipliers {
        match self {
            Scale::S => Multipliers {
                depth: 0.33,
                width: 0.5,
            },
            Scale::Toy => Multipliers {
                depth: 0.33,
                width: 0.125,
            },
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Scale::S => "s",
            Scale::Toy => "toy",
        }
    }
}

impl std::str::FromStr for Scale {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "s" => Ok(Scale::S),
            "toy" => Ok(Scale::Toy),
            other => Err(cfg_err!("unknown scale {other:?} (expected s|toy)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    Fpn,
    Panet,
    Bifpn,
}

impl std::str::FromStr for Topology {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fpn" => Ok(Topology::Fpn),
            "panet" => Ok(Topology::Panet),
            "bifpn" => Ok(Topology::Bifpn),
            other => Err(cfg_err!(
                "unsupported neck topology {other:?} (expected fpn|panet|bifpn)"
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelOptions {
    pub variant: Variant,
    pub scale: Scale,
    pub num_classes: usize,
    /// Overrides the variant's neck (PANet for baseline, BiFPN for PEC).
    pub neck: Option<Topology>,
    /// For PEC, also use Faster-EMA bottlenecks in neck C2F sites.
    pub faster_ema_in_neck: bool,
    pub bifpn_repeats: usize,
}

impl ModelOptions {
    pub fn new(variant: Variant, scale: Scale, num_classes: usize) -> Self {
        ModelOptions {
            variant,
            scale,
            num_classes,
            neck: None,
            faster_ema_in_neck: true,
            bifpn_repeats: 1,
        }
    }

    pub fn topology(&self) -> Topology {
        self.neck.unwrap_or(match self.variant {
            Variant::Baseline => Topology::Panet,
            Variant::Pec => Topology::Bifpn,
        })
    }
}

struct Builder {
    layers: Vec<LayerSpec>,
}

impl Builder {
    fn push(&mut self, name: impl Into<String>, kind: LayerKind, inputs: Vec<usize>) -> usize {
        let id = self.layers.len();
        self.layers.push(LayerSpec {
            id,
            name: name.into(),
            inputs,
            kind,
        });
        id
    }
}

fn width(m: Multipliers, x: usize) -> usize {
    let scaled = x as f64 * m.width;
    ((scaled / 8.0).ceil() as usize * 8).max(8)
}

fn depth(m: Multipliers, n: usize) -> usize {
    ((n as f64 * m.depth).round() as usize).max(1)
}

fn c2f_kind(faster: bool, cin: usize, cout: usize, n: usize, shortcut: bool) -> LayerKind {
    if faster {
        LayerKind::C2fFasterEma { cin, cout, n, shortcut }
    } else {
        LayerKind::C2f { cin, cout, n, shortcut }
    }
}

fn cbs(cin: usize, cout: usize, kernel: usize, stride: usize) -> LayerKind {
    LayerKind::Cbs {
        cin,
        cout,
        kernel,
        stride,
    }
}

fn fuse(channels: usize, arity: usize) -> LayerKind {
    LayerKind::Fuse {
        channels,
        weights: vec![1.0; arity],
        eps: FUSE_EPS,
    }
}

/// Neck settings independent of where the neck is attached.
#[derive(Clone, Copy, Debug)]
struct NeckCfg {
    topology: Topology,
    /// Uniform BiFPN width; the other topologies keep the incoming widths.
    bifpn_width: usize,
    c2f_depth: usize,
    faster_ema: bool,
    repeats: usize,
}

/// Appends a neck on features `(id, channels)` for P3, P4, P5 and returns the
/// three output ids.
fn append_neck(b: &mut Builder, feats: [(usize, usize); 3], cfg: NeckCfg) -> Result<[usize; 3]> {
    let [(p3, c3), (p4, c4), (p5, c5)] = feats;
    let n = cfg.c2f_depth;
    let fe = cfg.faster_ema;
    match cfg.topology {
        Topology::Fpn | Topology::Panet => {
            let up5 = b.push("neck.up5", LayerKind::Upsample, vec![p5]);
            let cat4 = b.push("neck.cat4", LayerKind::Concat, vec![up5, p4]);
            let td4 = b.push("neck.td4", c2f_kind(fe, c5 + c4, c4, n, false), vec![cat4]);
            let up4 = b.push("neck.up4", LayerKind::Upsample, vec![td4]);
            let cat3 = b.push("neck.cat3", LayerKind::Concat, vec![up4, p3]);
            let out3 = b.push("neck.out3", c2f_kind(fe, c4 + c3, c3, n, false), vec![cat3]);
            if cfg.topology == Topology::Fpn {
                return Ok([out3, td4, p5]);
            }
            let down3 = b.push("neck.down3", cbs(c3, c3, 3, 2), vec![out3]);
            let bu4 = b.push("neck.bu4", LayerKind::Concat, vec![down3, td4]);
            let out4 = b.push("neck.out4", c2f_kind(fe, c3 + c4, c4, n, false), vec![bu4]);
            let down4 = b.push("neck.down4", cbs(c4, c4, 3, 2), vec![out4]);
            let bu5 = b.push("neck.bu5", LayerKind::Concat, vec![down4, p5]);
            let out5 = b.push("neck.out5", c2f_kind(fe, c4 + c5, c5, n, false), vec![bu5]);
            Ok([out3, out4, out5])
        }
        Topology::Bifpn => {
            if cfg.repeats == 0 {
                return Err(cfg_err!("BiFPN needs at least one repeat"));
            }
            let w = cfg.bifpn_width;
            let l3 = b.push("neck.lat3", cbs(c3, w, 1, 1), vec![p3]);
            let l4 = b.push("neck.lat4", cbs(c4, w, 1, 1), vec![p4]);
            let l5 = b.push("neck.lat5", cbs(c5, w, 1, 1), vec![p5]);
            let mut lv = [l3, l4, l5];
            for r in 0..cfg.repeats {
                let [i3, i4, i5] = lv;
                let p = format!("neck.r{r}");
                let up5 = b.push(format!("{p}.up5"), LayerKind::Upsample, vec![i5]);
                let td4 = b.push(format!("{p}.td4"), fuse(w, 2), vec![i4, up5]);
                let up4 = b.push(format!("{p}.up4"), LayerKind::Upsample, vec![td4]);
                let out3 = b.push(format!("{p}.out3"), fuse(w, 2), vec![i3, up4]);
                let down3 = b.push(format!("{p}.down3"), cbs(w, w, 3, 2), vec![out3]);
                let out4 = b.push(format!("{p}.out4"), fuse(w, 3), vec![i4, td4, down3]);
                let down4 = b.push(format!("{p}.down4"), cbs(w, w, 3, 2), vec![out4]);
                let out5 = b.push(format!("{p}.out5"), fuse(w, 2), vec![i5, down4]);
                lv = [out3, out4, out5];
            }
            Ok(lv)
        }
    }
}

/// A standalone neck: layers `0..3` are the P3, P4, P5 placeholders.
#[derive(Clone, Debug, PartialEq)]
pub struct NeckFragment {
    pub layers: Vec<LayerSpec>,
    pub outputs: [usize; 3],
}

impl NeckFragment {
    /// Layers beyond the three placeholders.
    pub fn neck_layers(&self) -> &[LayerSpec] {
        &self.layers[3..]
    }

    pub fn node_count(&self) -> usize {
        self.layers.len() - 3
    }

    pub fn edge_count(&self) -> usize {
        self.neck_layers().iter().map(|l| l.inputs.len()).sum()
    }

    /// Edges from a finer to a coarser level (stride increasing).
    pub fn bottom_up_edges(&self) -> usize {
        self.neck_layers()
            .iter()
            .filter(|l| matches!(l.kind, LayerKind::Downsample) || matches!(l.kind, LayerKind::Cbs { stride: 2, .. }))
            .count()
    }

    pub fn count_kind(&self, label: &str) -> usize {
        self.neck_layers().iter().filter(|l| l.kind.label() == label).count()
    }
}

/// Builds a neck over P3..P5 inputs of the given widths.
pub fn build_neck(
    channels: [usize; 3],
    topology: Topology,
    repeats: usize,
    bifpn_width: usize,
) -> Result<NeckFragment> {
    let mut b = Builder { layers: Vec::new() };
    for (k, &c) in channels.iter().enumerate() {
        b.push(format!("P{}", k + 3), LayerKind::Input { channels: c }, vec![]);
    }
    let outputs = append_neck(
        &mut b,
        [(0, channels[0]), (1, channels[1]), (2, channels[2])],
        NeckCfg {
            topology,
            bifpn_width,
            c2f_depth: 1,
            faster_ema: false,
            repeats,
        },
    )?;
    Ok(NeckFragment {
        layers: b.layers,
        outputs,
    })
}

/// The baseline (C2F, SPPF, PANet) or PEC (C2F_Faster_EMA, SPPF_CPCA, BiFPN)
/// detector.
pub fn build_model(opts: &ModelOptions) -> Result<ModelGraph> {
    let m = opts.scale.multipliers();
    let pec = opts.variant == Variant::Pec;
    let c = |x| width(m, x);
    let d = |x| depth(m, x);
    let mut b = Builder { layers: Vec::new() };
    let x = b.push("input", LayerKind::Input { channels: 3 }, vec![]);
    let b0 = b.push("b0", cbs(3, c(64), 3, 2), vec![x]);
    let b1 = b.push("b1", cbs(c(64), c(128), 3, 2), vec![b0]);
    let b2 = b.push("b2", c2f_kind(pec, c(128), c(128), d(3), true), vec![b1]);
    let b3 = b.push("b3", cbs(c(128), c(256), 3, 2), vec![b2]);
    let b4 = b.push("b4", c2f_kind(pec, c(256), c(256), d(6), true), vec![b3]);
    let b5 = b.push("b5", cbs(c(256), c(512), 3, 2), vec![b4]);
    let b6 = b.push("b6", c2f_kind(pec, c(512), c(512), d(6), true), vec![b5]);
    let b7 = b.push("b7", cbs(c(512), c(1024), 3, 2), vec![b6]);
    let b8 = b.push("b8", c2f_kind(pec, c(1024), c(1024), d(3), true), vec![b7]);
    let sppf = if pec {
        LayerKind::SppfCpca {
            cin: c(1024),
            cout: c(1024),
        }
    } else {
        LayerKind::Sppf {
            cin: c(1024),
            cout: c(1024),
        }
    };
    let b9 = b.push("b9", sppf, vec![b8]);

    let topology = opts.topology();
    let bifpn_width = c(256);
    let outs = append_neck(
        &mut b,
        [(b4, c(256)), (b6, c(512)), (b9, c(1024))],
        NeckCfg {
            topology,
            bifpn_width,
            c2f_depth: d(3),
            faster_ema: pec && opts.faster_ema_in_neck,
            repeats: opts.bifpn_repeats,
        },
    )?;
    let widths: Vec<usize> = match topology {
        Topology::Bifpn => vec![bifpn_width; 3],
        _ => vec![c(256), c(512), c(1024)],
    };
    b.push(
        "head",
        LayerKind::Head {
            channels: widths,
            strides: vec![8, 16, 32],
            num_classes: opts.num_classes,
        },
        outs.to_vec(),
    );
    let outputs = outs
        .iter()
        .zip([8, 16, 32])
        .enumerate()
        .map(|(k, (&id, stride))| ScaleOutput {
            name: format!("P{}", k + 3),
            id,
            stride,
        })
        .collect();
    let name = match opts.variant {
        Variant::Baseline => format!("baseline-{}", opts.scale.label()),
        Variant::Pec => format!("pec-{}", opts.scale.label()),
    };
    let g = ModelGraph {
        name,
        multipliers: m,
        num_classes: opts.num_classes,
        layers: b.layers,
        outputs,
    };
    g.validate()?;
    Ok(g)
}
