use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::assign::{assign_targets, LevelGeometry};
use super::checkpoint::save_checkpoint;
use super::loss::{compute_loss, LossBreakdown, LossWeights};
use super::sgd::Sgd;
use crate::data::Sample;
use crate::error::{cfg_err, Error, Result};
use crate::eval::{mean_ap_threaded, nms, Detection, EvalConfig, GroundTruth, MapResult};
use crate::graph::{decode_head, Model};
use crate::nn::{Forward, Mode, Weights};
use crate::tensor::{Real, Shape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub loss: LossWeights,
    /// Score floor applied when decoding validation predictions.
    pub conf_threshold: f64,
    pub eval: EvalConfig,
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            momentum: 0.9,
            batch_size: 8,
            epochs: 50,
            seed: 0,
            loss: LossWeights::default(),
            conf_threshold: 0.01,
            eval: EvalConfig::default(),
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(cfg_err!("learning rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(cfg_err!("batch size must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(cfg_err!("momentum must lie in [0, 1)"));
        }
        self.eval.validate()
    }
}

/// Stacks samples into an `(N, 3, S, S)` batch plus ground truth whose image
/// ids are batch positions.
pub fn stack_batch<T: Real>(samples: &[&Sample]) -> Result<(Tensor<T>, Vec<GroundTruth>)> {
    let first = samples.first().ok_or_else(|| Error::Usage("empty batch".into()))?;
    let (w, h) = (first.image.width, first.image.height);
    let mut data = Vec::with_capacity(samples.len() * 3 * h * w);
    let mut gts = Vec::new();
    for (n, s) in samples.iter().enumerate() {
        if s.image.width != w || s.image.height != h {
            return Err(crate::error::dim_err!("batch mixes image sizes"));
        }
        data.extend_from_slice(s.image.to_tensor::<T>().data());
        gts.extend(s.ground_truth(n));
    }
    Ok((Tensor::new(Shape([samples.len(), 3, h, w]), data)?, gts))
}

pub fn head_geometry(image_hw: (usize, usize), strides: &[usize]) -> Vec<LevelGeometry> {
    strides
        .iter()
        .map(|&s| LevelGeometry {
            h: image_hw.0 / s,
            w: image_hw.1 / s,
            stride: s,
        })
        .collect()
}

/// One forward/backward pass on a batch. Returns the loss, parameter
/// gradients and staged batch-norm updates.
pub type NamedTensors<T> = Vec<(String, Tensor<T>)>;

pub fn batch_gradients<T: Real>(
    model: &Model,
    weights: &Weights<T>,
    images: &Tensor<T>,
    gts: &[GroundTruth],
    loss_weights: LossWeights,
) -> Result<(LossBreakdown, NamedTensors<T>, NamedTensors<T>)> {
    let mut f = Forward::new(weights, Mode::Train);
    let x = f.input(images.clone(), false);
    let levels = model.forward(&mut f, x)?;
    let s = images.shape();
    let geometry: Vec<LevelGeometry> = levels
        .iter()
        .map(|l| LevelGeometry {
            h: s.h() / l.stride,
            w: s.w() / l.stride,
            stride: l.stride,
        })
        .collect();
    let positives = assign_targets(gts, &geometry);
    let loss = compute_loss(&mut f.tape, &levels, &positives, loss_weights)?;
    if !loss.breakdown.total.is_finite() {
        return Err(Error::Usage(format!("non-finite loss {:?}", loss.breakdown)));
    }
    f.tape.backward(loss.total)?;
    let grads = f.param_grads();
    Ok((loss.breakdown, grads, f.into_updates()))
}

/// Decoded, suppressed detections for every sample; image ids are sample
/// positions.
pub fn predict_samples<T: Real>(
    model: &Model,
    weights: &Weights<T>,
    samples: &[Sample],
    conf_threshold: f64,
    nms_iou: f64,
    chunk: usize,
) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for (c, group) in samples.chunks(chunk.max(1)).enumerate() {
        let refs: Vec<&Sample> = group.iter().collect();
        let (images, _) = stack_batch::<T>(&refs)?;
        let s = images.shape();
        let head = model.predict(weights, &images)?;
        let dets = decode_head(&head, conf_threshold, (s.h(), s.w()));
        let offset = c * chunk.max(1);
        for n in 0..group.len() {
            let mine: Vec<Detection> = dets
                .iter()
                .filter(|d| d.image_id == n)
                .map(|d| Detection {
                    image_id: d.image_id + offset,
                    ..*d
                })
                .collect();
            out.extend(nms(&mine, nms_iou));
        }
    }
    Ok(out)
}

pub fn evaluate<T: Real>(
    model: &Model,
    weights: &Weights<T>,
    samples: &[Sample],
    conf_threshold: f64,
    cfg: &EvalConfig,
    threads: usize,
) -> Result<MapResult> {
    let dets = predict_samples(model, weights, samples, conf_threshold, cfg.nms_iou_threshold, 16)?;
    let gts: Vec<GroundTruth> = samples
        .iter()
        .enumerate()
        .flat_map(|(i, s)| s.ground_truth(i))
        .collect();
    Ok(mean_ap_threaded(&dets, &gts, cfg, threads))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub epoch: usize,
    pub box_loss: f64,
    pub cls_loss: f64,
    pub dfl_loss: f64,
    pub total: f64,
    pub val_map50: f64,
    pub val_map5095: f64,
}

pub fn log_csv(rows: &[TrainLogRow]) -> String {
    let mut s = String::from("epoch,box_loss,cls_loss,dfl_loss,total,val_map50,val_map5095\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.epoch, r.box_loss, r.cls_loss, r.dfl_loss, r.total, r.val_map50, r.val_map5095
        );
    }
    s
}

pub struct TrainOutcome<T> {
    pub rows: Vec<TrainLogRow>,
    pub best_epoch: usize,
    pub best_map50: f64,
    pub best: Weights<T>,
    pub last: Weights<T>,
}

/// Seeded mini-batch SGD. With `out_dir`, writes `best.ckpt` (highest
/// validation mAP@0.5, earliest on ties), `last.ckpt` and `train_log.csv`.
pub fn train<T: Real>(
    model: &Model,
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    mut on_epoch: impl FnMut(&TrainLogRow),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Usage("training split is empty".into()));
    }
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut weights: Weights<T> = model.init(&mut init_rng)?;
    let mut sgd = Sgd::new(cfg.learning_rate, cfg.momentum);
    let mut rows = Vec::with_capacity(cfg.epochs);
    let mut best = (0usize, f64::NEG_INFINITY, weights.clone());
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        let mut sums = LossBreakdown::default();
        let mut batches = 0usize;
        for idx in order.chunks(cfg.batch_size) {
            let refs: Vec<&Sample> = idx.iter().map(|&i| &train_set[i]).collect();
            let (images, gts) = stack_batch::<T>(&refs)?;
            let (b, grads, updates) = batch_gradients(model, &weights, &images, &gts, cfg.loss)?;
            sgd.step(&mut weights, &grads)?;
            weights.apply_updates(updates)?;
            sums.box_loss += b.box_loss;
            sums.cls_loss += b.cls_loss;
            sums.total += b.total;
            batches += 1;
        }
        let k = batches as f64;
        let (map50, map5095) = if val_set.is_empty() {
            (0.0, 0.0)
        } else {
            let m = evaluate(model, &weights, val_set, cfg.conf_threshold, &cfg.eval, cfg.threads)?;
            (m.map50, m.map5095)
        };
        let row = TrainLogRow {
            epoch,
            box_loss: sums.box_loss / k,
            cls_loss: sums.cls_loss / k,
            dfl_loss: 0.0,
            total: sums.total / k,
            val_map50: map50,
            val_map5095: map5095,
        };
        on_epoch(&row);
        rows.push(row);
        if map50 > best.1 {
            best = (epoch, map50, weights.clone());
            if let Some(dir) = out_dir {
                save_checkpoint(&dir.join("best.ckpt"), &model.graph, &best.2)?;
            }
        }
        if let Some(dir) = out_dir {
            std::fs::write(dir.join("train_log.csv"), log_csv(&rows))?;
        }
    }
    if let Some(dir) = out_dir {
        save_checkpoint(&dir.join("last.ckpt"), &model.graph, &weights)?;
    }
    Ok(TrainOutcome {
        rows,
        best_epoch: best.0,
        best_map50: best.1.max(0.0),
        best: best.2,
        last: weights,
    })
}

/// Errors unless `weights` has exactly the tensors `model` allocates.
pub fn check_layout<T: Real>(model: &Model, weights: &Weights<T>) -> Result<()> {
    let fresh: Weights<T> = model.init(&mut ChaCha8Rng::seed_from_u64(0))?;
    let sig = |w: &Weights<T>| {
        let mut v: Vec<(String, Shape)> = w
            .params()
            .map(|(n, t)| (n.to_string(), t.shape()))
            .chain(w.buffers().map(|(n, t)| (format!("buffer:{n}"), t.shape())))
            .collect();
        v.sort_by(|a, b| a.0.cmp(&b.0));
        v
    };
    if sig(&fresh) != sig(weights) {
        return Err(Error::Usage(format!(
            "checkpoint weights do not match model {}",
            model.graph.name
        )));
    }
    Ok(())
}
