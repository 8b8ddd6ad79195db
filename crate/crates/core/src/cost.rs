//! Exact parameter, MAC and memory-access accounting over model graphs.
//!
//! MACs count multiply-accumulates of convolutions (bias adds, norms,
//! activations, pooling and elementwise gating are free). Memory access
//! counts, per convolution, the input feature map read, the output written
//! and the weights read.

use std::fmt::Write;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::error::{cfg_err, Result};
use crate::graph::{Head, LayerKind, LayerSpec, ModelGraph};
use crate::nn::{CpcaConfig, EmaConfig, PConvConfig};

/// Cost of a single convolution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cost {
    pub params: u64,
    pub macs: u64,
    pub mem_access: u64,
}

impl std::ops::AddAssign for Cost {
    fn add_assign(&mut self, o: Cost) {
        self.params += o.params;
        self.macs += o.macs;
        self.mem_access += o.mem_access;
    }
}

/// Convolution of a `cin`-channel map producing an `h × w` output map
/// (extents are output extents). Returns `(params, macs)`.
pub fn conv_cost(h: u64, w: u64, cin: u64, cout: u64, k: u64, groups: u64, has_bias: bool) -> Result<(u64, u64)> {
    if groups == 0 || !cin.is_multiple_of(groups) || !cout.is_multiple_of(groups) {
        return Err(cfg_err!("groups {groups} must divide cin {cin} and cout {cout}"));
    }
    let weights = k * k * cin / groups * cout;
    let params = weights + if has_bias { cout } else { 0 };
    Ok((params, h * w * weights))
}

/// Cost of a partial convolution versus the regular convolution of the same
/// `(h, w, c, k)`, with exact ratios.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PConvCost {
    pub cp: u64,
    pub params: u64,
    pub macs: u64,
    pub mem_access: u64,
    pub regular_macs: u64,
    pub regular_mem_access: u64,
    pub macs_ratio: Ratio<u64>,
    /// Ratio of the dominant feature-map term `h·w·2c_p / h·w·2c`.
    pub mem_ratio_dominant: Ratio<u64>,
    /// Ratio of the full memory-access counts including weights.
    pub mem_ratio: Ratio<u64>,
}

pub fn pconv_cost(h: u64, w: u64, c: u64, r: f64, k: u64) -> Result<PConvCost> {
    let cfg = PConvConfig::new(c as usize).with_ratio(r);
    cfg.validate()?;
    let cp = cfg.convolved() as u64;
    let macs = h * w * k * k * cp * cp;
    let mem = h * w * 2 * cp + k * k * cp * cp;
    let regular_macs = h * w * k * k * c * c;
    let regular_mem = h * w * 2 * c + k * k * c * c;
    Ok(PConvCost {
        cp,
        params: k * k * cp * cp,
        macs,
        mem_access: mem,
        regular_macs,
        regular_mem_access: regular_mem,
        macs_ratio: Ratio::new(macs, regular_macs),
        mem_ratio_dominant: Ratio::new(h * w * 2 * cp, h * w * 2 * c),
        mem_ratio: Ratio::new(mem, regular_mem),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountOptions {
    /// Count the head as a distribution-style regressor with `reg_max` bins
    /// per side (4·reg_max box outputs plus the fixed `reg_max` projection).
    pub dfl_reg_max: Option<u64>,
    /// Count batch-norm running statistics as parameters.
    pub count_bn_buffers: bool,
}

impl CountOptions {
    pub fn plain() -> Self {
        CountOptions {
            dfl_reg_max: None,
            count_bn_buffers: false,
        }
    }

    pub fn dfl() -> Self {
        CountOptions {
            dfl_reg_max: Some(16),
            count_bn_buffers: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostRow {
    pub id: usize,
    pub name: String,
    pub kind: String,
    pub params: u64,
    pub macs: u64,
    pub mem_access: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub model: String,
    pub input_hw: Option<(u64, u64)>,
    pub options: CountOptions,
    pub rows: Vec<CostRow>,
    pub total_params: u64,
    pub total_macs: u64,
    pub total_mem_access: u64,
}

impl CostReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("id,kind,params,macs,mem_access\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{}", r.id, r.kind, r.params, r.macs, r.mem_access);
        }
        let _ = writeln!(
            s,
            "total,,{},{},{}",
            self.total_params, self.total_macs, self.total_mem_access
        );
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// FLOPs under the two-operations-per-MAC convention.
    pub fn total_flops(&self) -> u64 {
        2 * self.total_macs
    }

    pub fn params_of(&self, prefix: &str) -> u64 {
        self.rows
            .iter()
            .filter(|r| r.name.starts_with(prefix))
            .map(|r| r.params)
            .sum()
    }
}

/// Accumulates costs of one layer at a given input resolution.
struct Tally {
    cost: Cost,
    bn_buffers: bool,
}

impl Tally {
    fn conv(
        &mut self,
        h: u64,
        w: u64,
        cin: u64,
        cout: u64,
        kh: u64,
        kw: u64,
        stride: u64,
        groups: u64,
        bias: bool,
    ) -> (u64, u64) {
        // Zero extents mean a parameter-only count.
        let out = |x: u64, k: u64| {
            if x == 0 {
                0
            } else {
                (x + 2 * (k / 2) - k) / stride + 1
            }
        };
        let (ho, wo) = (out(h, kh), out(w, kw));
        let weights = kh * kw * cin / groups * cout;
        self.cost.params += weights + if bias { cout } else { 0 };
        self.cost.macs += ho * wo * weights;
        self.cost.mem_access += h * w * cin + ho * wo * cout + weights;
        (ho, wo)
    }

    fn bn(&mut self, c: u64) {
        self.cost.params += 2 * c;
        if self.bn_buffers {
            self.cost.params += 2 * c;
        }
    }

    fn cbs(&mut self, h: u64, w: u64, cin: u64, cout: u64, k: u64, stride: u64) -> (u64, u64) {
        let out = self.conv(h, w, cin, cout, k, k, stride, 1, false);
        self.bn(cout);
        out
    }

    /// Adds MACs and memory access of a convolution whose weights are
    /// already counted.
    fn reuse(&mut self, h: u64, w: u64, cin: u64, cout: u64, kh: u64, kw: u64, groups: u64, times: u64) {
        let mut scratch = Tally {
            cost: Cost::default(),
            bn_buffers: false,
        };
        scratch.conv(h, w, cin, cout, kh, kw, 1, groups, false);
        self.cost.macs += times * scratch.cost.macs;
        self.cost.mem_access += times * scratch.cost.mem_access;
    }

    fn ema(&mut self, h: u64, w: u64, c: u64) {
        let cfg = EmaConfig::new(c as usize);
        let (g, cg) = (cfg.groups as u64, cfg.group_channels() as u64);
        // Group weights are shared by all G groups; the 1×1 runs on the H×1
        // and 1×W pooled maps.
        self.cost.params += (cg * cg + cg) + (9 * cg * cg + cg) + 2 * cg;
        self.reuse(h, 1, cg, cg, 1, 1, 1, g);
        self.reuse(1, w, cg, cg, 1, 1, 1, g);
        self.reuse(h, w, cg, cg, 3, 3, 1, g);
    }

    fn c2f(&mut self, h: u64, w: u64, cin: u64, cout: u64, n: u64, faster: bool) {
        let c = cout / 2;
        self.cbs(h, w, cin, 2 * c, 1, 1);
        for _ in 0..n {
            match faster {
                false => {
                    self.cbs(h, w, c, c, 3, 1);
                    self.cbs(h, w, c, c, 3, 1);
                }
                true => {
                    let cfg = PConvConfig::new(c as usize);
                    let cp = cfg.convolved() as u64;
                    let k = cfg.kernel as u64;
                    self.conv(h, w, cp, cp, k, k, 1, 1, false);
                    self.cbs(h, w, c, 2 * c, 1, 1);
                    self.conv(h, w, 2 * c, c, 1, 1, 1, 1, false);
                    self.ema(h, w, c);
                }
            }
        }
        self.cbs(h, w, (2 + n) * c, cout, 1, 1);
    }

    fn cpca(&mut self, h: u64, w: u64, c: u64) {
        let cfg = CpcaConfig::new(c as usize);
        let hid = cfg.hidden() as u64;
        // The shared MLP runs on the average- and max-pooled descriptors.
        self.conv(1, 1, c, hid, 1, 1, 1, 1, true);
        self.conv(1, 1, hid, c, 1, 1, 1, 1, true);
        self.reuse(1, 1, c, hid, 1, 1, 1, 1);
        self.reuse(1, 1, hid, c, 1, 1, 1, 1);
        let b = cfg.base_kernel as u64;
        self.conv(h, w, c, c, b, b, 1, c, true);
        for &k in &cfg.strip_kernels {
            let k = k as u64;
            self.conv(h, w, c, c, 1, k, 1, c, true);
            self.conv(h, w, c, c, k, 1, 1, c, true);
        }
        self.conv(h, w, c, c, 1, 1, 1, 1, true);
    }

    fn sppf(&mut self, h: u64, w: u64, cin: u64, cout: u64, cpca: bool) {
        let hid = cin / 2;
        self.cbs(h, w, cin, hid, 1, 1);
        if cpca {
            self.cpca(h, w, 4 * hid);
        }
        self.cbs(h, w, 4 * hid, cout, 1, 1);
    }

    fn fuse(&mut self, h: u64, w: u64, c: u64, arity: u64) {
        self.cost.params += arity;
        self.conv(h, w, c, c, 3, 3, 1, c, false);
        self.bn(c);
        self.cbs(h, w, c, c, 1, 1);
    }

    fn head(&mut self, levels: &[(u64, u64, u64)], nc: u64, dfl: Option<u64>) {
        let box_out = dfl.map_or(4, |r| 4 * r);
        let (c2, c3) = Head::hidden_widths(levels[0].2 as usize, nc as usize, box_out as usize);
        let (c2, c3) = (c2 as u64, c3 as u64);
        for &(h, w, ch) in levels {
            self.cbs(h, w, ch, c2, 3, 1);
            self.cbs(h, w, c2, c2, 3, 1);
            self.conv(h, w, c2, box_out, 1, 1, 1, 1, true);
            self.cbs(h, w, ch, c3, 3, 1);
            self.cbs(h, w, c3, c3, 3, 1);
            self.conv(h, w, c3, nc, 1, 1, 1, 1, true);
        }
        if let Some(r) = dfl {
            // Fixed projection of the bins onto distances.
            self.cost.params += r;
            let cells: u64 = levels.iter().map(|&(h, w, _)| h * w).sum();
            self.cost.macs += 4 * r * cells;
        }
    }
}

fn layer_cost(l: &LayerSpec, dims: &[(u64, u64)], widths: &[u64], opts: CountOptions) -> Cost {
    let mut t = Tally {
        cost: Cost::default(),
        bn_buffers: opts.count_bn_buffers,
    };
    let (h, w) = l.inputs.first().map_or((0, 0), |&i| dims[i]);
    match &l.kind {
        LayerKind::Input { .. } | LayerKind::Upsample | LayerKind::Downsample | LayerKind::Concat => {}
        LayerKind::Cbs {
            cin,
            cout,
            kernel,
            stride,
        } => {
            t.cbs(h, w, *cin as u64, *cout as u64, *kernel as u64, *stride as u64);
        }
        LayerKind::C2f { cin, cout, n, .. } => t.c2f(h, w, *cin as u64, *cout as u64, *n as u64, false),
        LayerKind::C2fFasterEma { cin, cout, n, .. } => t.c2f(h, w, *cin as u64, *cout as u64, *n as u64, true),
        LayerKind::Sppf { cin, cout } => t.sppf(h, w, *cin as u64, *cout as u64, false),
        LayerKind::SppfCpca { cin, cout } => t.sppf(h, w, *cin as u64, *cout as u64, true),
        LayerKind::Fuse { channels, weights, .. } => t.fuse(h, w, *channels as u64, weights.len() as u64),
        LayerKind::Head { num_classes, .. } => {
            let levels: Vec<(u64, u64, u64)> = l.inputs.iter().map(|&i| (dims[i].0, dims[i].1, widths[i])).collect();
            t.head(&levels, *num_classes as u64, opts.dfl_reg_max);
        }
    }
    t.cost
}

fn report(graph: &ModelGraph, input_hw: Option<(u64, u64)>, opts: CountOptions) -> Result<CostReport> {
    let info = graph.infer()?;
    let (ih, iw) = input_hw.unwrap_or((0, 0));
    if input_hw.is_some() && (ih == 0 || iw == 0 || ih % 32 != 0 || iw % 32 != 0) {
        return Err(crate::error::dim_err!(
            "input extents must be positive multiples of 32, got {ih}x{iw}"
        ));
    }
    let dims: Vec<(u64, u64)> = info
        .iter()
        .map(|n| match n.stride {
            0 => (0, 0),
            s => (ih / s as u64, iw / s as u64),
        })
        .collect();
    let widths: Vec<u64> = info.iter().map(|n| n.channels as u64).collect();
    let mut rows = Vec::with_capacity(graph.layers.len());
    for l in &graph.layers {
        let c = layer_cost(l, &dims, &widths, opts);
        rows.push(CostRow {
            id: l.id,
            name: l.name.clone(),
            kind: l.kind.label().to_string(),
            params: c.params,
            macs: if input_hw.is_some() { c.macs } else { 0 },
            mem_access: if input_hw.is_some() { c.mem_access } else { 0 },
        });
    }
    Ok(CostReport {
        model: graph.name.clone(),
        input_hw,
        options: opts,
        total_params: rows.iter().map(|r| r.params).sum(),
        total_macs: rows.iter().map(|r| r.macs).sum(),
        total_mem_access: rows.iter().map(|r| r.mem_access).sum(),
        rows,
    })
}

/// Exact parameter totals per layer; MAC and memory columns are zero.
pub fn count_params(graph: &ModelGraph, opts: CountOptions) -> Result<CostReport> {
    report(graph, None, opts)
}

/// Parameters, MACs and memory access at an `input_hw` input.
pub fn model_macs(graph: &ModelGraph, input_hw: (u64, u64), opts: CountOptions) -> Result<CostReport> {
    report(graph, Some(input_hw), opts)
}

/// Percentage by which `candidate` has fewer parameters than `reference`.
pub fn reduction_percent(reference: u64, candidate: u64) -> f64 {
    100.0 * (reference as f64 - candidate as f64) / reference as f64
}
