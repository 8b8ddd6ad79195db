//! Acceptance criteria. Runs without the libtest harness so every criterion
//! prints exactly one PASS/FAIL line; the process fails if any criterion does.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use common::{brute_nms, max_pool_same, naive_conv, random, random_boxes, rng};
use num_rational::Ratio;
use pec_core::cost::{conv_cost, count_params, pconv_cost, reduction_percent, CountOptions};
use pec_core::data::{apportion, gen_synthetic, load_split, split_dataset, synth_image, Split, SynthConfig};
use pec_core::eval::{
    average_precision, fps_benchmark, iou, mean_ap, nms, pr_curve, BBox, Detection, EvalConfig, FakeTimer, FpsConfig,
    GroundTruth, WallTimer,
};
use pec_core::gradcheck::{run_suite, GradcheckConfig};
use pec_core::graph::{build_model, Model, ModelOptions, Scale, Variant};
use pec_core::nn::{Forward, Mode, PConv, PConvConfig, Sppf, Weights};
use pec_core::tensor::{ConvParams, Tape, Tensor};
use pec_core::train::{train, TrainConfig};
use rand::Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within_budget(start: Instant, budget: Duration) -> Result<Duration, String> {
    let t = start.elapsed();
    check(t < budget, || format!("took {t:.1?}, budget {budget:?}"))?;
    Ok(t)
}

fn ac1_pconv_ratios() -> Outcome {
    let start = Instant::now();
    let mut cases = 0;
    for h in [1u64, 3, 7, 20, 80] {
        for w in [1u64, 5, 16, 40] {
            for c in (4u64..=256).step_by(4) {
                for k in [1u64, 3, 5, 7] {
                    let p = pconv_cost(h, w, c, 0.25, k).map_err(|e| e.to_string())?;
                    let (_, full) = conv_cost(h, w, c, c, k, 1, false).map_err(|e| e.to_string())?;
                    let (_, part) = conv_cost(h, w, c / 4, c / 4, k, 1, false).map_err(|e| e.to_string())?;
                    let macs = Ratio::new(part, full);
                    let mem = Ratio::new(h * w * 2 * (c / 4), h * w * 2 * c);
                    check(macs == Ratio::new(1, 16) && p.macs_ratio == macs, || {
                        format!("macs ratio {} at h={h} w={w} c={c} k={k}", p.macs_ratio)
                    })?;
                    check(mem == Ratio::new(1, 4) && p.mem_ratio_dominant == mem, || {
                        format!("memory ratio {} at h={h} w={w} c={c} k={k}", p.mem_ratio_dominant)
                    })?;
                    cases += 1;
                }
            }
        }
    }
    let t = within_budget(start, Duration::from_secs(1))?;
    Ok(format!("{cases} shapes, MACs 1/16 and memory 1/4 exactly, {t:.1?}"))
}

fn ac2_parameter_accounting() -> Outcome {
    let start = Instant::now();
    let total = |v| -> Result<u64, String> {
        let g = build_model(&ModelOptions::new(v, Scale::S, 4)).map_err(|e| e.to_string())?;
        Ok(count_params(&g, CountOptions::dfl())
            .map_err(|e| e.to_string())?
            .total_params)
    };
    let (base, pec) = (total(Variant::Baseline)?, total(Variant::Pec)?);
    let off = |x: u64, target: f64| (x as f64 - target) / target;
    let red = reduction_percent(base, pec);
    check(off(base, 11.13e6).abs() <= 0.10, || {
        format!("baseline {base} outside 11.13M ±10%")
    })?;
    check(off(pec, 6.39e6).abs() <= 0.10, || {
        format!("pec {pec} outside 6.39M ±10%")
    })?;
    check(red >= 35.0, || format!("reduction {red:.2}% below 35%"))?;
    let t = within_budget(start, Duration::from_secs(1))?;
    Ok(format!(
        "baseline {base} ({:+.1}%), pec {pec} ({:+.1}%), reduction {red:.2}% (reference 42.58%), {t:.1?}",
        100.0 * off(base, 11.13e6),
        100.0 * off(pec, 6.39e6)
    ))
}

const REQUIRED_CASES: [&str; 13] = [
    "cbs",
    "pconv",
    "faster_ema_bottleneck",
    "ema",
    "cpca",
    "sppf",
    "sppf_cpca",
    "c2f_original",
    "c2f_faster_ema",
    "bifpn_fuse",
    "head",
    "detection_loss",
    "conv2d",
];

fn ac3_gradient_suite() -> Outcome {
    let start = Instant::now();
    let report = run_suite(&GradcheckConfig::default()).map_err(|e| e.to_string())?;
    for name in REQUIRED_CASES {
        check(report.results.iter().any(|r| r.name == name), || {
            format!("no gradient case for {name}")
        })?;
    }
    let failed: Vec<String> = report
        .failures()
        .iter()
        .map(|r| format!("{} {:.2e}", r.name, r.max_rel_err))
        .collect();
    check(failed.is_empty(), || format!("failed: {}", failed.join(", ")))?;
    check(report.tolerance <= 1e-4, || format!("tolerance {}", report.tolerance))?;
    let worst = report.results.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    let t = within_budget(start, Duration::from_secs(120))?;
    Ok(format!(
        "{} cases, worst rel err {worst:.2e} ≤ 1e-4, {t:.1?}",
        report.results.len()
    ))
}

fn ac4_structural_equivalences() -> Outcome {
    let mut pools = 0;
    for (seed, (h, w)) in [(1, 1), (3, 4), (5, 5), (7, 12), (13, 13), (16, 9)]
        .into_iter()
        .enumerate()
    {
        let x = random([2, 3, h, w], seed as u64);
        let p1 = max_pool_same(&x, 5);
        let p2 = max_pool_same(&p1, 5);
        let p3 = max_pool_same(&p2, 5);
        check(p2 == max_pool_same(&x, 9) && p3 == max_pool_same(&x, 13), || {
            format!("serial pools differ from 9/13 pools at {h}x{w}")
        })?;
        pools += 1;
    }

    let plain = Sppf::new("s", 32, 32, false);
    let att = Sppf::new("s", 32, 32, true);
    let mut wp = Weights::new();
    plain.init(&mut wp, &mut rng(1)).map_err(|e| e.to_string())?;
    let mut wa = Weights::new();
    att.init(&mut wa, &mut rng(2)).map_err(|e| e.to_string())?;
    wa.copy_shared_from(&wp);
    att.attention()
        .ok_or("SPPF_CPCA has no attention")?
        .set_identity(&mut wa)
        .map_err(|e| e.to_string())?;
    let x = random([2, 32, 8, 8], 3);
    let run = |block: &Sppf, w: &Weights<f64>| -> Result<Tensor<f64>, String> {
        let mut f = Forward::new(w, Mode::Infer);
        let v = f.input(x.clone(), false);
        let y = block.forward(&mut f, v).map_err(|e| e.to_string())?;
        Ok(f.tape.value(y).clone())
    };
    check(run(&plain, &wp)? == run(&att, &wa)?, || {
        "identity SPPF_CPCA differs from SPPF".into()
    })?;

    let mut worst = 0.0f64;
    for c in [1usize, 2, 4, 8, 16] {
        let p = PConv::new("p", PConvConfig::new(c).with_ratio(1.0));
        check(p.cfg.convolved() == c, || format!("cp {} != c {c}", p.cfg.convolved()))?;
        let mut w = Weights::new();
        p.init(&mut w, &mut rng(c as u64)).map_err(|e| e.to_string())?;
        let x = random([2, c, 7, 6], 40 + c as u64);
        let mut f = Forward::new(&w, Mode::Infer);
        let v = f.input(x.clone(), false);
        let y = p.forward(&mut f, v).map_err(|e| e.to_string())?;
        let kernel = w.param("p.conv.weight").map_err(|e| e.to_string())?;
        let oracle = naive_conv(&x, kernel, None, &ConvParams::new(c, c, 3).padding(1, 1));
        worst = worst.max(f.tape.value(y).max_abs_diff(&oracle));
    }
    check(worst <= 1e-12, || format!("PConv cp=c deviates by {worst:e}"))?;
    Ok(format!(
        "{pools} pool shapes exact, identity SPPF_CPCA exact, PConv cp=c max diff {worst:.1e}"
    ))
}

fn ac5_oracle_equivalence() -> Outcome {
    let mut shapes = 0;
    let mut worst = 0.0f64;
    for g in [1usize, 2] {
        for (cin_g, cout_g) in [(1usize, 1usize), (2, 3), (3, 2)] {
            for k in [1usize, 2, 3, 5] {
                for s in [1usize, 2] {
                    for p in 0..=2usize {
                        for h in 1..=8usize {
                            for w in 1..=8usize {
                                if h + 2 * p < k || w + 2 * p < k {
                                    continue;
                                }
                                let bias = (h + w) % 2 == 0;
                                let params = ConvParams::new(g * cin_g, g * cout_g, k)
                                    .groups(g)
                                    .stride(s)
                                    .padding(p, p)
                                    .bias(bias);
                                let seed = shapes as u64;
                                let x = random([2, g * cin_g, h, w], seed);
                                let wt = random(params.weight_shape().0, seed ^ 0xabc);
                                let b = random([1, g * cout_g, 1, 1], seed ^ 0xdef);
                                let mut tape = Tape::new();
                                let xv = tape.leaf(x.clone(), false);
                                let wv = tape.leaf(wt.clone(), false);
                                let bv = bias.then(|| tape.leaf(b.clone(), false));
                                let y = tape.conv2d(xv, wv, bv, &params).map_err(|e| e.to_string())?;
                                let oracle = naive_conv(&x, &wt, bias.then_some(&b), &params);
                                check(tape.value(y).shape() == oracle.shape(), || {
                                    format!("shape mismatch {params:?}")
                                })?;
                                worst = worst.max(tape.value(y).max_abs_diff(&oracle));
                                shapes += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    check(worst <= 1e-12, || format!("conv2d deviates by {worst:e}"))?;

    let mut r = rng(2024);
    for instance in 0..1000 {
        let dets = random_boxes(&mut r, 200, 3, 2);
        let thr = r.random_range(0.05..0.9);
        check(nms(&dets, thr) == brute_nms(&dets, thr), || {
            format!("NMS instance {instance} differs")
        })?;
    }
    Ok(format!(
        "conv2d on {shapes} shapes max diff {worst:.1e}; NMS identical on 1000 x 200-box instances"
    ))
}

/// Largest number of detections pairable with distinct ground truths.
fn max_matching(dets: &[Detection], gts: &[GroundTruth], thr: f64) -> usize {
    fn go(k: usize, dets: &[Detection], gts: &[GroundTruth], used: &mut Vec<bool>, thr: f64) -> usize {
        if k == dets.len() {
            return 0;
        }
        let mut best = go(k + 1, dets, gts, used, thr);
        for g in 0..gts.len() {
            if !used[g] && iou(&dets[k].bbox, &gts[g].bbox) >= thr {
                used[g] = true;
                best = best.max(1 + go(k + 1, dets, gts, used, thr));
                used[g] = false;
            }
        }
        best
    }
    go(0, dets, gts, &mut vec![false; gts.len()], thr)
}

fn ac6_metrics_fidelity() -> Outcome {
    let cfg = SynthConfig::new(20, 64, 11);
    let mut gts = Vec::new();
    for i in 0..cfg.num_images {
        let (_, labels) = synth_image(&cfg, i).map_err(|e| e.to_string())?;
        gts.extend(labels.iter().map(|l| GroundTruth {
            bbox: l.to_box(64, 64),
            class_id: l.class_id,
            image_id: i,
        }));
    }
    let perfect: Vec<Detection> = gts
        .iter()
        .map(|g| Detection {
            bbox: g.bbox,
            class_id: g.class_id,
            score: 1.0,
            image_id: g.image_id,
        })
        .collect();
    let m = mean_ap(&perfect, &gts, &EvalConfig::default());
    check(m.map50 == 1.0 && m.map5095 == 1.0, || {
        format!("perfect detector {} / {}", m.map50, m.map5095)
    })?;

    let b = |x1: f64, y2: f64| BBox::new(x1, 0.0, x1 + 10.0, y2);
    let gt = |x1| GroundTruth {
        bbox: b(x1, 10.0),
        class_id: 0,
        image_id: 0,
    };
    let det = |bbox, score| Detection {
        bbox,
        class_id: 0,
        score,
        image_id: 0,
    };
    let fixture_gts = vec![gt(0.0), gt(20.0), gt(40.0)];
    let dets = vec![
        det(b(0.0, 10.0), 0.9),
        det(b(0.0, 9.0), 0.8),
        det(b(60.0, 10.0), 0.7),
        det(b(21.0, 10.0), 0.6),
        det(b(40.0, 4.0), 0.5),
    ];
    let curve = pr_curve(&dets, &fixture_gts, 0, 0.5);
    let mut enumerated = Vec::new();
    for k in 1..=dets.len() {
        let tp = max_matching(&dets[..k], &fixture_gts, 0.5) as f64;
        enumerated.push((tp / k as f64, tp / 3.0));
    }
    let got: Vec<(f64, f64)> = curve.points.iter().map(|p| (p.precision, p.recall)).collect();
    check(got == enumerated, || {
        format!("curve {got:?} vs enumerated {enumerated:?}")
    })?;
    let reference: f64 = (0..101)
        .map(|g| {
            let r = g as f64 / 100.0;
            enumerated
                .iter()
                .filter(|p| p.1 >= r - 1e-12)
                .map(|p| p.0)
                .fold(0.0, f64::max)
        })
        .sum::<f64>()
        / 101.0;
    let ap = average_precision(&curve, 101).ap;
    check((ap - reference).abs() < 1e-15, || {
        format!("AP {ap} vs enumerated {reference}")
    })?;

    let items: Vec<(String, String)> = (0..2546).map(|i| (format!("i{i}.ppm"), format!("i{i}.txt"))).collect();
    let sizes = split_dataset(&items, [7, 1, 2], 0).map_err(|e| e.to_string())?.sizes();
    check(
        sizes == [1782, 255, 509] && apportion(2546, &[7, 1, 2]) == vec![1782, 255, 509],
        || format!("split {sizes:?}"),
    )?;
    Ok(format!(
        "perfect mAP@.5 = mAP@.5:.95 = 1.0; fixture AP {ap:.6} matches enumeration; split {sizes:?}"
    ))
}

fn ac7_learning_smoke() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let summary = gen_synthetic(&SynthConfig::new(286, 64, 7), dir.path()).map_err(|e| e.to_string())?;
    check(summary.split_sizes[0] == 200, || {
        format!("split {:?}", summary.split_sizes)
    })?;
    let tr = load_split(dir.path(), Split::Train).map_err(|e| e.to_string())?;
    let va = load_split(dir.path(), Split::Val).map_err(|e| e.to_string())?;
    let model = Model::new(build_model(&ModelOptions::new(Variant::Pec, Scale::Toy, 4)).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        learning_rate: 0.03,
        epochs: 50,
        ..TrainConfig::default()
    };
    let run = || -> Result<_, String> {
        let start = Instant::now();
        let out = train::<f32>(&model, &tr, &va, &cfg, None, |_| {}).map_err(|e| e.to_string())?;
        Ok((out, start.elapsed()))
    };
    let (first, t) = run()?;
    let crossed = first.rows.iter().find(|r| r.val_map50 >= 0.85).map(|r| r.epoch);
    check(crossed.is_some(), || {
        format!("best val mAP@.5 {:.4} at epoch {}", first.best_map50, first.best_epoch)
    })?;
    check(t < Duration::from_secs(15 * 60), || format!("training took {t:.1?}"))?;
    let (second, _) = run()?;
    let losses = |o: &pec_core::train::TrainOutcome<f32>| {
        o.rows
            .iter()
            .map(|r| (r.box_loss, r.cls_loss, r.total))
            .collect::<Vec<_>>()
    };
    check(losses(&first) == losses(&second), || {
        "same-seed rerun changed the loss log".into()
    })?;
    Ok(format!(
        "{} train / {} val, mAP@.5 ≥ 0.85 first at epoch {}, best {:.4}, {t:.1?}; rerun log identical",
        tr.len(),
        va.len(),
        crossed.unwrap_or_default(),
        first.best_map50
    ))
}

fn ac8_fps_semantics() -> Outcome {
    let fake = fps_benchmark(100, |_| Ok(()), &mut FakeTimer::spread(0.5, 100), FpsConfig::default())
        .map_err(|e| e.to_string())?;
    let printed = format!("{:.1}", fake.mean);
    check(printed == "200.0", || format!("fake timer printed {printed}"))?;

    let cfg = SynthConfig::new(16, 64, 5);
    let images: Vec<Tensor<f32>> = (0..16)
        .map(|i| synth_image(&cfg, i).map(|(img, _)| img.to_tensor()))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let mut fps = Vec::new();
    for v in [Variant::Pec, Variant::Baseline] {
        let model = Model::new(build_model(&ModelOptions::new(v, Scale::Toy, 4)).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
        let w: Weights<f32> = model.init(&mut rng(0)).map_err(|e| e.to_string())?;
        let r = fps_benchmark(
            images.len(),
            |i| model.predict(&w, &images[i]).map(|_| ()),
            &mut WallTimer,
            FpsConfig { warmup: 1, repeats: 3 },
        )
        .map_err(|e| e.to_string())?;
        check(r.mean.is_finite() && r.mean > 0.0, || {
            format!("{} FPS {}", model.graph.name, r.mean)
        })?;
        fps.push((model.graph.name.clone(), r.mean));
    }
    let ordering = if fps[0].1 >= fps[1].1 { "faster" } else { "slower" };
    Ok(format!(
        "fake timer prints {printed}; {} {:.1} FPS is {ordering} than {} {:.1} FPS on this CPU",
        fps[0].0, fps[0].1, fps[1].0, fps[1].1
    ))
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("AC1 pconv cost ratios", ac1_pconv_ratios),
        ("AC2 parameter accounting", ac2_parameter_accounting),
        ("AC3 gradient suite", ac3_gradient_suite),
        ("AC4 structural equivalences", ac4_structural_equivalences),
        ("AC5 oracle equivalence", ac5_oracle_equivalence),
        ("AC6 metrics fidelity", ac6_metrics_fidelity),
        ("AC7 end-to-end learning", ac7_learning_smoke),
        ("AC8 fps semantics", ac8_fps_semantics),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
