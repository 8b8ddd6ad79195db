//! Declarative model graphs: layer specs, validation, neck topologies, model
//! builders, the executor and head decoding.

mod build;
mod head;
mod model;

use serde::{Deserialize, Serialize};

use crate::error::{cfg_err, Result};

pub use build::{build_model, build_neck, ModelOptions, NeckFragment, Scale, Topology, Variant};
pub use head::{decode_head, Head, HeadOutput, LevelOutput, LevelVars};
pub use model::{bifpn_fuse, forward_model, Model};

pub const FUSE_EPS: f64 = 1e-4;

/// One node of a model graph.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub id: usize,
    pub name: String,
    pub inputs: Vec<usize>,
    #[serde(flatten)]
    pub kind: LayerKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    /// The image. Exactly one, with id 0.
    Input {
        channels: usize,
    },
    Cbs {
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
    },
    C2f {
        cin: usize,
        cout: usize,
        n: usize,
        shortcut: bool,
    },
    C2fFasterEma {
        cin: usize,
        cout: usize,
        n: usize,
        shortcut: bool,
    },
    Sppf {
        cin: usize,
        cout: usize,
    },
    SppfCpca {
        cin: usize,
        cout: usize,
    },
    /// Nearest-neighbour 2× upsampling.
    Upsample,
    /// Nearest top-left 2× downsampling.
    Downsample,
    Concat,
    /// Fast normalised weighted fusion followed by a depthwise-separable
    /// block. `weights` are the initial raw fusion weights, one per input.
    Fuse {
        channels: usize,
        weights: Vec<f64>,
        eps: f64,
    },
    /// Decoupled detection head over the three detection scales.
    Head {
        channels: Vec<usize>,
        strides: Vec<usize>,
        num_classes: usize,
    },
}

impl LayerKind {
    pub fn label(&self) -> &'static str {
        match self {
            LayerKind::Input { .. } => "input",
            LayerKind::Cbs { .. } => "cbs",
            LayerKind::C2f { .. } => "c2f",
            LayerKind::C2fFasterEma { .. } => "c2f_faster_ema",
            LayerKind::Sppf { .. } => "sppf",
            LayerKind::SppfCpca { .. } => "sppf_cpca",
            LayerKind::Upsample => "upsample",
            LayerKind::Downsample => "downsample",
            LayerKind::Concat => "concat",
            LayerKind::Fuse { .. } => "fuse",
            LayerKind::Head { .. } => "head",
        }
    }
}

/// A detection scale exposed to the head.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaleOutput {
    pub name: String,
    pub id: usize,
    pub stride: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Multipliers {
    pub depth: f64,
    pub width: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelGraph {
    pub name: String,
    pub multipliers: Multipliers,
    pub num_classes: usize,
    pub layers: Vec<LayerSpec>,
    pub outputs: Vec<ScaleOutput>,
}

/// Channel width and stride of a node's output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeInfo {
    pub channels: usize,
    pub stride: usize,
}

impl ModelGraph {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let g: ModelGraph = serde_json::from_str(s)?;
        g.validate()?;
        Ok(g)
    }

    pub fn layer(&self, id: usize) -> Result<&LayerSpec> {
        self.layers.get(id).ok_or_else(|| cfg_err!("no layer with id {id}"))
    }

    pub fn head(&self) -> Result<&LayerSpec> {
        self.layers
            .iter()
            .find(|l| matches!(l.kind, LayerKind::Head { .. }))
            .ok_or_else(|| cfg_err!("graph {} has no head", self.name))
    }

    pub fn count_kind(&self, label: &str) -> usize {
        self.layers.iter().filter(|l| l.kind.label() == label).count()
    }

    /// Directed edges `(from, to)`.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.layers
            .iter()
            .flat_map(|l| l.inputs.iter().map(move |&i| (i, l.id)))
            .collect()
    }

    /// Output width and stride of every node, checking channel consistency.
    pub fn infer(&self) -> Result<Vec<NodeInfo>> {
        let mut info: Vec<NodeInfo> = Vec::with_capacity(self.layers.len());
        for (pos, l) in self.layers.iter().enumerate() {
            if l.id != pos {
                return Err(cfg_err!("layer {} has id {}, expected {pos}", l.name, l.id));
            }
            for &i in &l.inputs {
                if i >= pos {
                    return Err(cfg_err!(
                        "layer {} references {i}, which is not an earlier layer (cycle or dangling edge)",
                        l.name
                    ));
                }
            }
            let ins: Vec<NodeInfo> = l.inputs.iter().map(|&i| info[i]).collect();
            let arity = |want: usize| -> Result<()> {
                if ins.len() != want {
                    return Err(cfg_err!(
                        "{} layer {} needs {want} input(s), has {}",
                        l.kind.label(),
                        l.name,
                        ins.len()
                    ));
                }
                Ok(())
            };
            let width = |want: usize| -> Result<()> {
                if ins[0].channels != want {
                    return Err(cfg_err!(
                        "layer {} expects {want} input channels, producer gives {}",
                        l.name,
                        ins[0].channels
                    ));
                }
                Ok(())
            };
            let node = match &l.kind {
                LayerKind::Input { channels } => {
                    arity(0)?;
                    if pos != 0 {
                        return Err(cfg_err!("input layer must be layer 0"));
                    }
                    NodeInfo {
                        channels: *channels,
                        stride: 1,
                    }
                }
                LayerKind::Cbs { cin, cout, stride, .. } => {
                    arity(1)?;
                    width(*cin)?;
                    NodeInfo {
                        channels: *cout,
                        stride: ins[0].stride * stride,
                    }
                }
                LayerKind::C2f { cin, cout, .. }
                | LayerKind::C2fFasterEma { cin, cout, .. }
                | LayerKind::Sppf { cin, cout }
                | LayerKind::SppfCpca { cin, cout } => {
                    arity(1)?;
                    width(*cin)?;
                    NodeInfo {
                        channels: *cout,
                        stride: ins[0].stride,
                    }
                }
                LayerKind::Upsample => {
                    arity(1)?;
                    if ins[0].stride < 2 {
                        return Err(cfg_err!("cannot upsample stride-1 layer {}", l.name));
                    }
                    NodeInfo {
                        channels: ins[0].channels,
                        stride: ins[0].stride / 2,
                    }
                }
                LayerKind::Downsample => {
                    arity(1)?;
                    NodeInfo {
                        channels: ins[0].channels,
                        stride: ins[0].stride * 2,
                    }
                }
                LayerKind::Concat => {
                    if ins.len() < 2 {
                        return Err(cfg_err!("concat {} needs at least 2 inputs", l.name));
                    }
                    same_stride(l, &ins)?;
                    NodeInfo {
                        channels: ins.iter().map(|i| i.channels).sum(),
                        stride: ins[0].stride,
                    }
                }
                LayerKind::Fuse { channels, weights, eps } => {
                    if ins.len() < 2 {
                        return Err(cfg_err!("fuse {} needs at least 2 inputs", l.name));
                    }
                    if weights.len() != ins.len() {
                        return Err(cfg_err!(
                            "fuse {} has {} raw weights for {} inputs",
                            l.name,
                            weights.len(),
                            ins.len()
                        ));
                    }
                    if *eps <= 0.0 {
                        return Err(cfg_err!("fuse {} needs eps > 0", l.name));
                    }
                    same_stride(l, &ins)?;
                    if ins.iter().any(|i| i.channels != *channels) {
                        return Err(cfg_err!("fuse {} inputs must all have {channels} channels", l.name));
                    }
                    NodeInfo {
                        channels: *channels,
                        stride: ins[0].stride,
                    }
                }
                LayerKind::Head {
                    channels,
                    strides,
                    num_classes,
                } => {
                    arity(3)?;
                    if *num_classes == 0 {
                        return Err(cfg_err!("head needs at least one class"));
                    }
                    for (k, inp) in ins.iter().enumerate() {
                        if channels.get(k) != Some(&inp.channels) || strides.get(k) != Some(&inp.stride) {
                            return Err(cfg_err!(
                                "head level {k} declared ({:?}, {:?}) but producer gives ({}, {})",
                                channels.get(k),
                                strides.get(k),
                                inp.channels,
                                inp.stride
                            ));
                        }
                    }
                    NodeInfo { channels: 0, stride: 0 }
                }
            };
            info.push(node);
        }
        Ok(info)
    }

    /// Checks the DAG, channel consistency, the three detection scales and
    /// that no layer is an orphan.
    pub fn validate(&self) -> Result<()> {
        let info = self.infer()?;
        if self.layers.is_empty() || !matches!(self.layers[0].kind, LayerKind::Input { .. }) {
            return Err(cfg_err!("graph must start with an input layer"));
        }
        if self.count_kind("input") != 1 {
            return Err(cfg_err!("graph must have exactly one input layer"));
        }
        if self.outputs.len() != 3 {
            return Err(cfg_err!("expected 3 detection outputs, got {}", self.outputs.len()));
        }
        for w in self.outputs.windows(2) {
            if w[1].stride <= w[0].stride {
                return Err(cfg_err!("detection strides must strictly increase"));
            }
        }
        for o in &self.outputs {
            let node = info
                .get(o.id)
                .ok_or_else(|| cfg_err!("output {} references missing layer {}", o.name, o.id))?;
            if node.stride != o.stride {
                return Err(cfg_err!(
                    "output {} declared stride {} but layer {} has stride {}",
                    o.name,
                    o.stride,
                    o.id,
                    node.stride
                ));
            }
        }
        let head = self.head()?;
        if self.count_kind("head") != 1 {
            return Err(cfg_err!("graph must have exactly one head"));
        }
        let out_ids: Vec<usize> = self.outputs.iter().map(|o| o.id).collect();
        if head.inputs != out_ids {
            return Err(cfg_err!(
                "head inputs {:?} differ from outputs {:?}",
                head.inputs,
                out_ids
            ));
        }
        let mut consumed = vec![false; self.layers.len()];
        for (from, _) in self.edges() {
            consumed[from] = true;
        }
        for l in &self.layers {
            if l.id != head.id && !consumed[l.id] {
                return Err(cfg_err!("layer {} ({}) is an orphan", l.name, l.id));
            }
        }
        Ok(())
    }
}

fn same_stride(l: &LayerSpec, ins: &[NodeInfo]) -> Result<()> {
    if ins.iter().any(|i| i.stride != ins[0].stride) {
        return Err(cfg_err!("layer {} merges inputs at different strides", l.name));
    }
    Ok(())
}
