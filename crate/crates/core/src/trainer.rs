//! AdamW with warm-up and cosine decay, and the epoch loop around the model.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use log::{debug, info};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Batcher, Dataset};
use crate::error::{Error, Result};
use crate::eval::{self, DetectionSet};
use crate::graph::{Gradients, Graph, ParamStore};
use crate::matching::{self, CostWeights, LossBreakdown, LossConfig};
use crate::model::{self, Model};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Optimizer state: first and second moments plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Gradients,
    v: Gradients,
    t: i32,
}

impl AdamW {
    pub fn new(params: &ParamStore, config: AdamWConfig) -> Self {
        Self {
            config,
            m: Gradients::zeros_like(params),
            v: Gradients::zeros_like(params),
            t: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// One update: decoupled decay `p -= lr * wd * p`, then the
    /// bias-corrected Adam step.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients, lr: f64) {
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        self.t += 1;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        for id in params.ids().collect::<Vec<_>>() {
            let g = grads.get(id).data();
            let m = self.m.get_mut(id).data_mut();
            m.iter_mut().zip(g).for_each(|(m, g)| *m = beta1 * *m + (1.0 - beta1) * g);
            let v = self.v.get_mut(id).data_mut();
            v.iter_mut().zip(g).for_each(|(v, g)| *v = beta2 * *v + (1.0 - beta2) * g * g);
            let (m, v) = (self.m.get(id).data(), self.v.get(id).data());
            let p = params.get_mut(id).data_mut();
            for i in 0..p.len() {
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                p[i] = p[i] - lr * weight_decay * p[i] - lr * update;
            }
        }
    }
}

/// Linear ramp from 0 over `warmup_steps`, then half-cosine decay to 0 at
/// `total_steps`.
pub fn lr_schedule(step: usize, total_steps: usize, warmup_steps: usize, base_lr: f64) -> f64 {
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    let span = total_steps.saturating_sub(warmup_steps).max(1);
    let progress = ((step - warmup_steps) as f64 / span as f64).min(1.0);
    base_lr * 0.5 * (1.0 + (PI * progress).cos())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub lambda: f64,
    /// Max global gradient norm; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub seed: u64,
    pub thresholds: Vec<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            warmup_epochs: 5,
            base_lr: 1e-4,
            weight_decay: 1e-4,
            batch_size: 8,
            lambda: 1.0,
            grad_clip: Some(1.0),
            seed: 0,
            thresholds: vec![0.3, 0.4, 0.5, 0.6, 0.7],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.warmup_epochs >= self.epochs {
            return bad("warmup_epochs must be smaller than epochs");
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return bad("learning rate must be finite and non-negative");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight decay must be finite and non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be finite and non-negative");
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return bad("grad_clip must be positive");
        }
        if self.thresholds.is_empty() {
            return bad("at least one evaluation threshold is required");
        }
        Ok(())
    }
}

/// One line of the NDJSON training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: usize,
    /// Rate used by the last step of the epoch.
    pub lr: f64,
    pub loss: f64,
    pub loss_cls: f64,
    pub loss_reg: f64,
    pub loss_l1: f64,
    pub val_map: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOutputs {
    /// NDJSON log, one record per epoch.
    pub log: Option<PathBuf>,
    /// Best checkpoint by validation mAP (last epoch without validation data).
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_map: Option<f64>,
    /// Parameters at `best_epoch`.
    pub best_params: ParamStore,
}

/// Loss and parameter gradients for one video under the Hungarian assignment.
pub fn video_gradients(model: &Model, data: &Dataset, i: usize, loss: &LossConfig) -> Result<(LossBreakdown, Gradients)> {
    let gts = data.targets(i);
    let mut g = Graph::new();
    let out = model.forward(&mut g, &data.videos[i].features)?;
    let preds = model::predictions(&g, &out);
    let assignment = matching::assign(&preds, &gts, CostWeights::default())?;
    let (l, breakdown) = matching::total_loss_var(&mut g, out.logits, out.boundaries, &gts, &assignment, loss)?;
    let mut grads = Gradients::zeros_like(model.params());
    g.backward_params(l, &mut grads)?;
    Ok((breakdown, grads))
}

/// Detections for every video in `data`, times in seconds.
pub fn detect(model: &Model, data: &Dataset) -> Result<DetectionSet> {
    let per_video: Vec<Result<(String, Vec<eval::Detection>)>> = data
        .videos
        .par_iter()
        .map(|v| {
            let preds = model.predict(&v.features)?;
            Ok((v.video_id.clone(), eval::detections_from_predictions(&preds, v.duration)))
        })
        .collect();
    per_video.into_iter().collect()
}

/// Average mAP of `model` on `data` over `thresholds`.
pub fn evaluate(model: &Model, data: &Dataset, thresholds: &[f64]) -> Result<eval::EvalReport> {
    let dets = detect(model, data)?;
    eval::map_suite(&dets, &data.annotations.ground_truth(), thresholds)
}

fn check_finite(b: &LossBreakdown, epoch: usize, step: usize) -> Result<()> {
    for (term, v) in [("loss_cls", b.cls), ("loss_reg", b.reg), ("loss_l1", b.l1), ("loss", b.total)] {
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss {
                term: term.into(),
                epoch,
                step,
            });
        }
    }
    Ok(())
}

/// Trains `model` in place. Per-video work in a batch runs in parallel and
/// is summed in batch order, so results do not depend on thread count.
pub fn train_loop(
    model: &mut Model,
    train: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
    outputs: &TrainOutputs,
) -> Result<TrainSummary> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let loss_cfg = LossConfig {
        lambda: cfg.lambda,
        ..LossConfig::default()
    };
    let batcher = Batcher::new(train.len(), cfg.batch_size, cfg.seed)?;
    let per_epoch = batcher.batches_per_epoch();
    let total_steps = per_epoch * cfg.epochs;
    let warmup_steps = per_epoch * cfg.warmup_epochs;
    let mut opt = AdamW::new(
        model.params(),
        AdamWConfig {
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
    );
    let mut log = match &outputs.log {
        Some(p) => Some(BufWriter::new(File::create(p).map_err(|e| Error::io(p, e))?)),
        None => None,
    };

    let mut records = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, Option<f64>, ParamStore)> = None;
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut sums = LossBreakdown::default();
        let mut lr = 0.0;
        for batch in batcher.epoch(epoch) {
            let results: Vec<Result<(LossBreakdown, Gradients)>> = batch
                .par_iter()
                .map(|&i| video_gradients(model, train, i, &loss_cfg))
                .collect();
            let mut grads = Gradients::zeros_like(model.params());
            let mut batch_loss = LossBreakdown::default();
            for r in results {
                let (b, g) = r?;
                check_finite(&b, epoch, step)?;
                grads.add(&g);
                batch_loss.total += b.total;
                batch_loss.cls += b.cls;
                batch_loss.reg += b.reg;
                batch_loss.l1 += b.l1;
            }
            let inv = 1.0 / batch.len() as f64;
            grads.scale(inv);
            if !grads.is_finite() {
                return Err(Error::NonFiniteLoss {
                    term: "gradient".into(),
                    epoch,
                    step,
                });
            }
            if let Some(max) = cfg.grad_clip {
                let norm = grads.global_norm();
                if norm > max {
                    grads.scale(max / norm);
                }
            }
            lr = lr_schedule(step, total_steps, warmup_steps, cfg.base_lr);
            opt.step(model.params_mut(), &grads, lr);
            debug!("epoch {epoch} step {step} lr {lr:.3e} loss {:.5}", batch_loss.total * inv);
            sums.total += batch_loss.total;
            sums.cls += batch_loss.cls;
            sums.reg += batch_loss.reg;
            sums.l1 += batch_loss.l1;
            step += 1;
        }
        let n = train.len() as f64;
        let val_map = match val {
            Some(v) if !v.is_empty() => Some(evaluate(model, v, &cfg.thresholds)?.average_map),
            _ => None,
        };
        let rec = EpochRecord {
            epoch,
            step,
            lr,
            loss: sums.total / n,
            loss_cls: sums.cls / n,
            loss_reg: sums.reg / n,
            loss_l1: sums.l1 / n,
            val_map,
        };
        info!(
            "epoch {:>3} loss {:.5} (cls {:.5} reg {:.5} l1 {:.5}) val mAP {}",
            epoch,
            rec.loss,
            rec.loss_cls,
            rec.loss_reg,
            rec.loss_l1,
            val_map.map_or("-".to_string(), |m| format!("{m:.4}"))
        );
        if let Some(w) = log.as_mut() {
            let p = outputs.log.as_ref().expect("log path");
            let line = serde_json::to_string(&rec).map_err(|e| Error::json(p, e))?;
            writeln!(w, "{line}").map_err(|e| Error::io(p, e))?;
        }
        // ties keep the later epoch; without validation the last epoch wins
        let improved = match (&best, val_map) {
            (None, _) => true,
            (Some((_, Some(b), _)), Some(m)) => m >= *b,
            _ => true,
        };
        if improved {
            best = Some((epoch, val_map, model.params().clone()));
            if let Some(p) = &outputs.checkpoint {
                model.save(p)?;
            }
        }
        records.push(rec);
    }
    if let (Some(w), Some(p)) = (log.as_mut(), outputs.log.as_ref()) {
        w.flush().map_err(|e| Error::io(p, e))?;
    }
    let (best_epoch, best_val_map, best_params) = best.expect("at least one epoch");
    Ok(TrainSummary {
        records,
        best_epoch,
        best_val_map,
        best_params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_store(x: f64) -> (ParamStore, crate::graph::ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::new(vec![1], vec![x]).unwrap());
        (s, id)
    }

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let (mut s, id) = scalar_store(0.7);
        let before = s.get(id).clone();
        let mut opt = AdamW::new(
            &s,
            AdamWConfig {
                weight_decay: 0.0,
                ..AdamWConfig::default()
            },
        );
        let g = Gradients::zeros_like(&s);
        for _ in 0..5 {
            opt.step(&mut s, &g, 1e-2);
        }
        assert_eq!(s.get(id), &before);
    }

    #[test]
    fn zero_gradient_decay_is_multiplicative() {
        let (mut s, id) = scalar_store(2.0);
        let mut opt = AdamW::new(
            &s,
            AdamWConfig {
                weight_decay: 0.1,
                ..AdamWConfig::default()
            },
        );
        let g = Gradients::zeros_like(&s);
        let mut expect = 2.0;
        for _ in 0..3 {
            opt.step(&mut s, &g, 0.5);
            expect -= 0.5 * 0.1 * expect;
            assert_eq!(s.get(id).data()[0], expect);
        }
    }

    #[test]
    fn first_step_moves_by_lr() {
        let (mut s, id) = scalar_store(1.0);
        let mut opt = AdamW::new(
            &s,
            AdamWConfig {
                weight_decay: 0.0,
                ..AdamWConfig::default()
            },
        );
        let mut g = Gradients::zeros_like(&s);
        g.get_mut(id).data_mut()[0] = 1.0;
        opt.step(&mut s, &g, 1e-3);
        let moved = 1.0 - s.get(id).data()[0];
        assert!((moved - 1e-3 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn schedule_shape() {
        let (total, warm, base) = (100, 10, 1e-3);
        assert_eq!(lr_schedule(0, total, warm, base), 0.0);
        assert_eq!(lr_schedule(warm, total, warm, base), base);
        assert!(lr_schedule(total - 1, total, warm, base) < base * 1e-3);
        let lrs: Vec<f64> = (0..total).map(|s| lr_schedule(s, total, warm, base)).collect();
        assert!(lrs[..=warm].windows(2).all(|w| w[1] > w[0]));
        assert!(lrs[warm..].windows(2).all(|w| w[1] <= w[0]));
        // continuity across the warm-up boundary
        let eps = base / warm as f64;
        assert!((lrs[warm] - lrs[warm - 1]).abs() <= eps + 1e-18);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig {
                epochs: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                warmup_epochs: 30,
                ..TrainConfig::default()
            },
            TrainConfig {
                lambda: -1.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                batch_size: 0,
                ..TrainConfig::default()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }
}
