//! Central finite-difference verification of every differentiable primitive
//! and composite block.
//!
//! Each case builds a small graph in `f64`, reduces its outputs to the scalar
//! `Σ R ⊙ out` with a fixed random `R`, and compares reverse-mode gradients of
//! sampled input and parameter entries against `(f(x + h) − f(x − h)) / 2h`.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{cfg_err, Result};
use crate::eval::BBox;
use crate::eval::GroundTruth;
use crate::graph::{bifpn_fuse, Head, LevelVars};
use crate::nn::{
    C2f, C2fVariant, Cbs, Cpca, CpcaConfig, DepthwiseConv, DwSeparable, Ema, EmaConfig, FasterEmaBottleneck, Forward,
    Mode, PConv, PConvConfig, Sppf, Weights,
};
use crate::tensor::{Axis, BinaryKind, ConvParams, Fault, PoolKind, Shape, Tensor, UnaryKind, Var};
use crate::train::{assign_targets, compute_loss, LevelGeometry, LossWeights};

type Build = Box<dyn Fn(&mut Forward<f64>, &[Var]) -> Result<Vec<Var>>>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradcheckConfig {
    /// Largest accepted relative error.
    pub tolerance: f64,
    /// Finite-difference step.
    pub step: f64,
    /// Entries probed per tensor (all entries when the tensor is smaller).
    pub samples_per_tensor: usize,
    pub seed: u64,
    /// Deliberately corrupted backward rule, for testing the suite itself.
    #[serde(skip)]
    pub fault: Option<Fault>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            tolerance: 1e-4,
            step: 1e-5,
            samples_per_tensor: 8,
            seed: 0,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    /// Worst relative error over all probed entries.
    pub max_rel_err: f64,
    /// Tensor holding the worst entry.
    pub worst: String,
    pub probes: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub step: f64,
    pub results: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn failures(&self) -> Vec<&CheckResult> {
        self.results.iter().filter(|r| !r.passed).collect()
    }

    pub fn table(&self) -> String {
        let mut s = format!("{:<22} {:>12} {:>7}  {}\n", "op", "max_rel_err", "probes", "status");
        for r in &self.results {
            s.push_str(&format!(
                "{:<22} {:>12.3e} {:>7}  {}\n",
                r.name,
                r.max_rel_err,
                r.probes,
                if r.passed { "ok" } else { "FAIL" }
            ));
        }
        s
    }
}

/// `|a − n| / max(|a|, |n|, 1e−3)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// One differentiable graph with its inputs and weights.
pub struct Case {
    pub name: String,
    pub inputs: Vec<Tensor<f64>>,
    pub weights: Weights<f64>,
    pub mode: Mode,
    build: Build,
}

impl Case {
    pub fn new(
        name: impl Into<String>,
        inputs: Vec<Tensor<f64>>,
        weights: Weights<f64>,
        build: impl Fn(&mut Forward<f64>, &[Var]) -> Result<Vec<Var>> + 'static,
    ) -> Self {
        Case {
            name: name.into(),
            inputs,
            weights,
            mode: Mode::Train,
            build: Box::new(build),
        }
    }

    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }

    fn objective(&self, inputs: &[Tensor<f64>], weights: &Weights<f64>, probes: &[Tensor<f64>]) -> Result<f64> {
        let mut f = Forward::new(weights, self.mode).with_param_grads(false);
        let vars: Vec<Var> = inputs.iter().map(|t| f.input(t.clone(), false)).collect();
        let outs = (self.build)(&mut f, &vars)?;
        Ok(outs
            .iter()
            .zip(probes)
            .map(|(&o, r)| {
                f.tape
                    .value(o)
                    .data()
                    .iter()
                    .zip(r.data())
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
            })
            .sum())
    }

    /// Random projections, one per output, fixed by `seed`.
    fn probes(&self, seed: u64) -> Result<Vec<Tensor<f64>>> {
        let mut f = Forward::new(&self.weights, self.mode).with_param_grads(false);
        let vars: Vec<Var> = self.inputs.iter().map(|t| f.input(t.clone(), false)).collect();
        let outs = (self.build)(&mut f, &vars)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
        Ok(outs
            .iter()
            .map(|&o| Tensor::uniform(f.tape.shape(o), -1.0, 1.0, &mut rng))
            .collect())
    }

    pub fn check(&self, cfg: &GradcheckConfig) -> Result<CheckResult> {
        let probes = self.probes(cfg.seed)?;

        let mut f = Forward::new(&self.weights, self.mode)
            .with_fault(cfg.fault)
            .with_param_grads(true);
        let vars: Vec<Var> = self.inputs.iter().map(|t| f.input(t.clone(), true)).collect();
        let outs = (self.build)(&mut f, &vars)?;
        let mut total = None;
        for (&o, r) in outs.iter().zip(&probes) {
            let rv = f.tape.constant(r.clone());
            let prod = f.tape.mul(o, rv)?;
            let s = f.tape.sum(prod);
            total = Some(match total {
                None => s,
                Some(t) => f.tape.add(t, s)?,
            });
        }
        let total = total.ok_or_else(|| cfg_err!("gradient case {} has no outputs", self.name))?;
        f.tape.backward(total)?;
        let input_grads: Vec<Tensor<f64>> = vars
            .iter()
            .zip(&self.inputs)
            .map(|(&v, t)| f.tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        let param_grads = f.param_grads();
        drop(f);

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut pick = |n: usize| -> Vec<usize> {
            if n <= cfg.samples_per_tensor {
                (0..n).collect()
            } else {
                let mut v = sample(&mut rng, n, cfg.samples_per_tensor).into_vec();
                v.sort_unstable();
                v
            }
        };
        let h = cfg.step;
        let mut worst = (0.0f64, String::new());
        let mut probes_done = 0usize;
        let mut record = |err: f64, label: &str| {
            if err > worst.0 || worst.1.is_empty() {
                worst = (err.max(worst.0), label.to_string());
            }
        };

        for (k, g) in input_grads.iter().enumerate() {
            for i in pick(g.numel()) {
                let mut plus = self.inputs.clone();
                plus[k].data_mut()[i] += h;
                let mut minus = self.inputs.clone();
                minus[k].data_mut()[i] -= h;
                let n = (self.objective(&plus, &self.weights, &probes)?
                    - self.objective(&minus, &self.weights, &probes)?)
                    / (2.0 * h);
                record(relative_error(g.data()[i], n), &format!("input{k}"));
                probes_done += 1;
            }
        }
        for (name, g) in &param_grads {
            for i in pick(g.numel()) {
                let mut plus = self.weights.clone();
                plus.param_mut(name)?.data_mut()[i] += h;
                let mut minus = self.weights.clone();
                minus.param_mut(name)?.data_mut()[i] -= h;
                let n = (self.objective(&self.inputs, &plus, &probes)?
                    - self.objective(&self.inputs, &minus, &probes)?)
                    / (2.0 * h);
                record(relative_error(g.data()[i], n), name);
                probes_done += 1;
            }
        }
        Ok(CheckResult {
            name: self.name.clone(),
            max_rel_err: worst.0,
            worst: worst.1,
            probes: probes_done,
            passed: worst.0 <= cfg.tolerance,
        })
    }
}

fn rand_t(rng: &mut ChaCha8Rng, dims: [usize; 4], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::uniform(Shape(dims), lo, hi, rng)
}

fn unary_case(name: &str, kind: UnaryKind, rng: &mut ChaCha8Rng) -> Case {
    let x = rand_t(rng, [2, 3, 3, 4], -2.0, 2.0);
    Case::new(name, vec![x], Weights::new(), move |f, v| {
        Ok(vec![f.tape.unary(v[0], kind)])
    })
}

fn binary_case(name: &str, kind: BinaryKind, rng: &mut ChaCha8Rng) -> Case {
    let a = rand_t(rng, [2, 3, 3, 4], -1.5, 1.5);
    let b = rand_t(rng, [2, 3, 3, 1], 0.5, 1.5);
    Case::new(name, vec![a, b], Weights::new(), move |f, v| {
        Ok(vec![f.tape.binary(v[0], v[1], kind)?])
    })
}

/// Single-tensor primitives, each with a parameter-free case.
pub fn primitive_cases(seed: u64) -> Result<Vec<Case>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut cases = Vec::new();

    let conv = ConvParams::new(4, 6, 3).stride(2).groups(2).bias(true).same()?;
    let (x, w, b) = (
        rand_t(r, [2, 4, 5, 6], -1.0, 1.0),
        rand_t(r, [6, 2, 3, 3], -0.5, 0.5),
        rand_t(r, [1, 6, 1, 1], -0.5, 0.5),
    );
    cases.push(Case::new("conv2d", vec![x, w, b], Weights::new(), move |f, v| {
        Ok(vec![f.tape.conv2d(v[0], v[1], Some(v[2]), &conv)?])
    }));

    let (x, w, b) = (
        rand_t(r, [2, 3, 5, 7], -1.0, 1.0),
        rand_t(r, [3, 1, 1, 5], -0.5, 0.5),
        rand_t(r, [1, 3, 1, 1], -0.5, 0.5),
    );
    cases.push(Case::new("depthwise_conv2d", vec![x, w, b], Weights::new(), |f, v| {
        Ok(vec![f.tape.depthwise_conv2d(v[0], v[1], Some(v[2]), (1, 5))?])
    }));

    let x = rand_t(r, [2, 2, 6, 5], -1.0, 1.0);
    cases.push(Case::new("max_pool2d", vec![x], Weights::new(), |f, v| {
        Ok(vec![f.tape.pool2d(v[0], PoolKind::Max, 3, 2, 1)?])
    }));
    let x = rand_t(r, [2, 2, 6, 5], -1.0, 1.0);
    cases.push(Case::new("avg_pool2d", vec![x], Weights::new(), |f, v| {
        Ok(vec![f.tape.pool2d(v[0], PoolKind::Avg, 3, 1, 1)?])
    }));
    let x = rand_t(r, [2, 3, 4, 5], -1.0, 1.0);
    cases.push(Case::new("global_max_pool", vec![x], Weights::new(), |f, v| {
        Ok(vec![f.tape.global_max_pool(v[0])])
    }));
    let x = rand_t(r, [2, 3, 4, 5], -1.0, 1.0);
    cases.push(Case::new("mean_over", vec![x], Weights::new(), |f, v| {
        Ok(vec![
            f.tape.mean_over(v[0], Axis::Height),
            f.tape.mean_over(v[0], Axis::Width),
            f.tape.mean_over(v[0], Axis::Both),
        ])
    }));

    let (x, g, b) = (
        rand_t(r, [3, 4, 3, 3], -1.0, 2.0),
        rand_t(r, [1, 4, 1, 1], 0.5, 1.5),
        rand_t(r, [1, 4, 1, 1], -0.5, 0.5),
    );
    cases.push(Case::new("batch_norm_train", vec![x, g, b], Weights::new(), |f, v| {
        Ok(vec![f.tape.batch_norm_train(v[0], v[1], v[2], 1e-5)?.0])
    }));
    let (x, g, b) = (
        rand_t(r, [2, 4, 3, 3], -1.0, 2.0),
        rand_t(r, [1, 4, 1, 1], 0.5, 1.5),
        rand_t(r, [1, 4, 1, 1], -0.5, 0.5),
    );
    let rm = [0.1, -0.2, 0.3, 0.0];
    let rv = [0.5, 1.0, 1.5, 2.0];
    cases.push(Case::new(
        "batch_norm_infer",
        vec![x, g, b],
        Weights::new(),
        move |f, v| Ok(vec![f.tape.batch_norm_infer(v[0], v[1], v[2], &rm, &rv, 1e-5)?]),
    ));
    let (x, g, b) = (
        rand_t(r, [2, 3, 3, 4], -1.0, 2.0),
        rand_t(r, [1, 3, 1, 1], 0.5, 1.5),
        rand_t(r, [1, 3, 1, 1], -0.5, 0.5),
    );
    cases.push(Case::new("instance_norm", vec![x, g, b], Weights::new(), |f, v| {
        Ok(vec![f.tape.instance_norm(v[0], v[1], v[2], 1e-5)?])
    }));

    for (name, kind) in [
        ("sigmoid", UnaryKind::Sigmoid),
        ("silu", UnaryKind::Silu),
        ("relu", UnaryKind::Relu),
        ("softplus", UnaryKind::Softplus),
        ("atan", UnaryKind::Atan),
        ("square", UnaryKind::Square),
    ] {
        cases.push(unary_case(name, kind, r));
    }
    for (name, kind) in [
        ("add", BinaryKind::Add),
        ("sub", BinaryKind::Sub),
        ("mul", BinaryKind::Mul),
        ("div", BinaryKind::Div),
        ("minimum", BinaryKind::Min),
        ("maximum", BinaryKind::Max),
    ] {
        cases.push(binary_case(name, kind, r));
    }

    let x = rand_t(r, [2, 3, 2, 2], -1.0, 1.0);
    cases.push(Case::new("scale", vec![x], Weights::new(), |f, v| {
        Ok(vec![f.tape.scale(v[0], -1.75)])
    }));
    let (a, b) = (rand_t(r, [2, 2, 3, 3], -1.0, 1.0), rand_t(r, [2, 3, 3, 3], -1.0, 1.0));
    cases.push(Case::new("concat_channels", vec![a, b], Weights::new(), |f, v| {
        Ok(vec![f.tape.concat_channels(&[v[0], v[1], v[0]])?])
    }));
    let x = rand_t(r, [2, 5, 2, 3], -1.0, 1.0);
    cases.push(Case::new("slice_channels", vec![x], Weights::new(), |f, v| {
        Ok(vec![f.tape.slice_channels(v[0], 1, 3)?])
    }));
    let x = rand_t(r, [2, 4, 2, 3], -1.0, 1.0);
    cases.push(Case::new("reshape", vec![x], Weights::new(), |f, v| {
        let y = f.tape.reshape(v[0], [4, 2, 2, 3])?;
        let y = f.tape.unary(y, UnaryKind::Square);
        Ok(vec![y])
    }));
    let x = rand_t(r, [2, 2, 3, 2], -1.0, 1.0);
    cases.push(Case::new("upsample2x", vec![x], Weights::new(), |f, v| {
        Ok(vec![f.tape.upsample2x(v[0])])
    }));
    let x = rand_t(r, [2, 2, 4, 6], -1.0, 1.0);
    cases.push(Case::new("downsample2x", vec![x], Weights::new(), |f, v| {
        Ok(vec![f.tape.downsample2x(v[0])?])
    }));
    let x = rand_t(r, [2, 5, 2, 2], -2.0, 2.0);
    cases.push(Case::new("softmax_channels", vec![x], Weights::new(), |f, v| {
        Ok(vec![f.tape.softmax_channels(v[0])])
    }));
    let x = rand_t(r, [2, 4, 2, 3], -1.0, 1.0);
    cases.push(Case::new("sum_channels", vec![x], Weights::new(), |f, v| {
        Ok(vec![f.tape.sum_channels(v[0])])
    }));
    let x = rand_t(r, [2, 3, 2, 2], -1.0, 1.0);
    cases.push(Case::new("sum_mean", vec![x], Weights::new(), |f, v| {
        Ok(vec![f.tape.sum(v[0]), f.tape.mean(v[0])])
    }));
    let x = rand_t(r, [2, 3, 2, 2], -3.0, 3.0);
    let t = Tensor::from_fn(Shape([2, 3, 2, 2]), |[n, c, h, w]| ((n + c + h + w) % 2) as f64);
    cases.push(Case::new("bce_with_logits", vec![x], Weights::new(), move |f, v| {
        Ok(vec![f.tape.bce_with_logits(v[0], &t, 0.25)?])
    }));
    Ok(cases)
}

fn block_case<B: 'static>(
    name: &str,
    block: B,
    dims: [usize; 4],
    rng: &mut ChaCha8Rng,
    init: impl Fn(&B, &mut Weights<f64>, &mut ChaCha8Rng) -> Result<()>,
    fwd: impl Fn(&B, &mut Forward<f64>, Var) -> Result<Var> + 'static,
) -> Result<Case> {
    let mut w = Weights::new();
    init(&block, &mut w, rng)?;
    let x = rand_t(rng, dims, -1.0, 1.0);
    Ok(Case::new(name, vec![x], w, move |f, v| Ok(vec![fwd(&block, f, v[0])?])))
}

/// Composite blocks, checked in training mode.
pub fn block_cases(seed: u64) -> Result<Vec<Case>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let r = &mut rng;
    let mut cases = vec![block_case(
        "cbs",
        Cbs::square("cbs", 3, 5, 3, 2),
        [2, 3, 6, 6],
        r,
        |b, w, r| b.init(w, r),
        |b, f, x| b.forward(f, x),
    )?];
    cases.push(block_case(
        "dw_separable",
        DwSeparable::new("dws", 4, 6, 3),
        [2, 4, 5, 5],
        r,
        |b, w, r| b.init(w, r),
        |b, f, x| b.forward(f, x),
    )?);
    cases.push(block_case(
        "depthwise_layer",
        DepthwiseConv::new("dw", 3, (7, 1), true),
        [2, 3, 5, 4],
        r,
        |b, w, r| b.init(w, r),
        |b, f, x| b.forward(f, x),
    )?);
    cases.push(block_case(
        "pconv",
        PConv::new("pconv", PConvConfig::new(8)),
        [2, 8, 5, 5],
        r,
        |b, w, r| b.init(w, r),
        |b, f, x| b.forward(f, x),
    )?);
    cases.push(block_case(
        "faster_ema_bottleneck",
        FasterEmaBottleneck::new("feb", 8, true),
        [2, 8, 4, 4],
        r,
        |b, w, r| b.init(w, r),
        |b, f, x| b.forward(f, x),
    )?);
    cases.push(block_case(
        "ema",
        Ema::new("ema", EmaConfig::new(8)),
        [2, 8, 4, 5],
        r,
        |b, w, r| b.init(w, r),
        |b, f, x| b.forward(f, x),
    )?);
    cases.push(block_case(
        "cpca",
        Cpca::new("cpca", CpcaConfig::new(8)),
        [2, 8, 5, 5],
        r,
        |b, w, r| b.init(w, r),
        |b, f, x| b.forward(f, x),
    )?);
    cases.push(block_case(
        "sppf",
        Sppf::new("sppf", 8, 6, false),
        [2, 8, 5, 5],
        r,
        |b, w, r| b.init(w, r),
        |b, f, x| b.forward(f, x),
    )?);
    cases.push(block_case(
        "sppf_cpca",
        Sppf::new("sppf", 8, 6, true),
        [2, 8, 5, 5],
        r,
        |b, w, r| b.init(w, r),
        |b, f, x| b.forward(f, x),
    )?);
    cases.push(block_case(
        "c2f_original",
        C2f::new("c2f", 4, 8, 1, true, C2fVariant::Original),
        [2, 4, 4, 4],
        r,
        |b, w, r| b.init(w, r),
        |b, f, x| b.forward(f, x),
    )?);
    cases.push(block_case(
        "c2f_faster_ema",
        C2f::new("c2f", 4, 16, 1, true, C2fVariant::FasterEma),
        [2, 4, 4, 4],
        r,
        |b, w, r| b.init(w, r),
        |b, f, x| b.forward(f, x),
    )?);

    let parts: Vec<Tensor<f64>> = (0..3).map(|_| rand_t(r, [2, 3, 3, 3], -1.0, 1.0)).collect();
    let raw = rand_t(r, [1, 3, 1, 1], 0.2, 1.2);
    let mut inputs = parts;
    inputs.push(raw);
    cases.push(Case::new("bifpn_fuse", inputs, Weights::new(), |f, v| {
        Ok(vec![bifpn_fuse(&mut f.tape, &v[..3], v[3], 1e-4)?])
    }));

    let head = Head::new("head", vec![4, 6], vec![8, 16], 3);
    let mut w = Weights::new();
    head.init(&mut w, r)?;
    let feats = vec![rand_t(r, [2, 4, 4, 4], -1.0, 1.0), rand_t(r, [2, 6, 2, 2], -1.0, 1.0)];
    cases.push(Case::new("head", feats, w, move |f, v| {
        let levels = head.forward(f, v)?;
        Ok(levels.iter().flat_map(|l| [l.cls, l.boxes]).collect())
    }));

    cases.push(loss_case(r));
    Ok(cases)
}

/// Detection loss on free head maps with a few assigned ground-truth boxes.
fn loss_case(r: &mut ChaCha8Rng) -> Case {
    let geometry = [
        LevelGeometry { h: 4, w: 4, stride: 8 },
        LevelGeometry { h: 2, w: 2, stride: 16 },
    ];
    let gts = vec![
        GroundTruth {
            bbox: BBox::new(2.0, 3.0, 13.5, 15.0),
            class_id: 1,
            image_id: 0,
        },
        GroundTruth {
            bbox: BBox::new(9.0, 1.0, 30.0, 29.0),
            class_id: 0,
            image_id: 0,
        },
        GroundTruth {
            bbox: BBox::new(17.0, 16.5, 24.0, 31.0),
            class_id: 2,
            image_id: 1,
        },
    ];
    let positives = assign_targets(&gts, &geometry);
    let mut inputs = Vec::new();
    for g in &geometry {
        inputs.push(rand_t(r, [2, 3, g.h, g.w], -2.0, 2.0));
        inputs.push(rand_t(r, [2, 4, g.h, g.w], 0.2, 2.0));
    }
    Case::new("detection_loss", inputs, Weights::new(), move |f, v| {
        let levels: Vec<LevelVars> = geometry
            .iter()
            .enumerate()
            .map(|(k, g)| LevelVars {
                cls: v[2 * k],
                boxes: v[2 * k + 1],
                stride: g.stride,
            })
            .collect();
        let loss = compute_loss(&mut f.tape, &levels, &positives, LossWeights::default())?;
        Ok(vec![loss.total])
    })
}

pub fn suite(seed: u64) -> Result<Vec<Case>> {
    let mut cases = primitive_cases(seed)?;
    cases.extend(block_cases(seed)?);
    Ok(cases)
}

pub fn run_suite(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    if !(cfg.tolerance > 0.0) || !(cfg.step > 0.0) || cfg.samples_per_tensor == 0 {
        return Err(cfg_err!("gradcheck needs positive tolerance, step and sample count"));
    }
    let results = suite(cfg.seed)?
        .iter()
        .map(|c| c.check(cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(GradcheckReport {
        tolerance: cfg.tolerance,
        step: cfg.step,
        results,
    })
}
