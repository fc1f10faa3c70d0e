//! Training loop, evaluation of a model on a split, and the training log.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::config::{LossConfig, RunConfig};
use crate::data::dataset::Sample;
use crate::data::eval::{evaluate, Detection, EvalReport, ImageDetections, ImageTruth};
use crate::error::{Error, Result};
use crate::matching::{set_loss, LossBreakdown};
use crate::model::{Model, Prediction};
use crate::optim::{clip_grad_norm, AdamW, AdamWConfig};
use crate::params::{Bindings, ParamStore};
use crate::tensor::Tensor;

/// Loss and parameter gradients for one image.
pub fn image_gradients(
    model: &Model,
    store: &ParamStore,
    sample: &Sample,
    loss: &LossConfig,
) -> Result<(LossBreakdown, Vec<Tensor>)> {
    let g = Graph::new();
    let p = Bindings::new(&g, store, true);
    let out = model.forward(&p, g.constant(sample.image.clone()))?;
    let masks = out.head.upsampled_masks(model.mask_stride())?;
    let l = set_loss(out.head.class_probs, masks, &sample.instances, loss)?;
    let grads = g.backward(l.total)?;
    Ok((l.breakdown, p.collect(grads)))
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub cls: f64,
    pub mask: f64,
    /// Validation AP and AP50, when evaluated this epoch.
    pub ap: Option<f64>,
    pub ap50: Option<f64>,
    pub seconds: f64,
}

impl EpochLog {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("log entries serialize")
    }
}

/// Appends log lines to a file, flushing after each.
pub struct LogWriter {
    file: std::fs::File,
    path: std::path::PathBuf,
}

impl LogWriter {
    pub fn append(path: &Path) -> Result<Self> {
        let file = std::fs::OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
        Ok(LogWriter { file, path: path.to_owned() })
    }

    pub fn write(&mut self, entry: &EpochLog) -> Result<()> {
        writeln!(self.file, "{}", entry.to_line()).and_then(|_| self.file.flush()).map_err(|e| Error::io(&self.path, e))
    }
}

pub struct TrainOutcome {
    pub model: Model,
    pub store: ParamStore,
    pub logs: Vec<EpochLog>,
    /// Validation report after the final epoch.
    pub report: EvalReport,
}

/// Trains a fresh model on `train`, evaluating on `val`. `on_epoch` sees
/// every log entry as soon as it is complete.
pub fn train(
    cfg: &RunConfig,
    train: &[Sample],
    val: &[Sample],
    mut on_epoch: impl FnMut(&EpochLog, &Model, &ParamStore) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::InvalidArgument("training needs non-empty train and validation splits".into()));
    }
    let t = &cfg.train;
    let (model, mut store) = Model::new(&cfg.model, t.seed)?;
    let mut opt = AdamW::new(&store, AdamWConfig { lr: t.lr, weight_decay: t.weight_decay, ..Default::default() });
    let mut rng = ChaCha8Rng::seed_from_u64(t.seed ^ 0x7261_6e64);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut logs = Vec::with_capacity(t.epochs);
    let mut report = None;
    for epoch in 1..=t.epochs {
        let start = Instant::now();
        let lr = t.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut sums = [0.0; 3];
        for batch in order.chunks(t.batch_size) {
            let results: Vec<(LossBreakdown, Vec<Tensor>)> = batch
                .par_iter()
                .map(|&i| image_gradients(&model, &store, &train[i], &cfg.loss))
                .collect::<Result<_>>()?;
            let scale = 1.0 / batch.len() as f64;
            let mut grads: Vec<Tensor> = store.values().iter().map(|v| Tensor::zeros(v.shape())).collect();
            for (b, g) in &results {
                sums[0] += b.total;
                sums[1] += b.cls_term;
                sums[2] += b.mask_term;
                for (acc, gi) in grads.iter_mut().zip(g) {
                    acc.add_assign(gi);
                }
            }
            for g in grads.iter_mut() {
                *g = g.scale(scale);
            }
            clip_grad_norm(&mut grads, t.clip_norm);
            opt.step(&mut store, &grads, lr)?;
        }
        let n = train.len() as f64;
        let evaluate_now = epoch == t.epochs || (t.eval_every > 0 && epoch % t.eval_every == 0);
        let eval = if evaluate_now { Some(evaluate_model(&model, &store, val, 0.0)?) } else { None };
        let entry = EpochLog {
            epoch,
            lr,
            loss: sums[0] / n,
            cls: sums[1] / n,
            mask: sums[2] / n,
            ap: eval.as_ref().map(|r| r.ap),
            ap50: eval.as_ref().map(|r| r.ap50),
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!("epoch {epoch}: {}", entry.to_line());
        on_epoch(&entry, &model, &store)?;
        logs.push(entry);
        if eval.is_some() {
            report = eval;
        }
    }
    let report = match report {
        Some(r) => r,
        None => evaluate_model(&model, &store, val, 0.0)?,
    };
    Ok(TrainOutcome { model, store, logs, report })
}

/// Predictions for every sample, in sample order.
pub fn predict_all(
    model: &Model,
    store: &ParamStore,
    samples: &[Sample],
    threshold: f64,
) -> Result<Vec<Vec<Prediction>>> {
    samples.par_iter().map(|s| model.predict(store, &s.image, threshold)).collect()
}

/// Mask AP of the model's predictions above `threshold` on `samples`.
pub fn evaluate_model(model: &Model, store: &ParamStore, samples: &[Sample], threshold: f64) -> Result<EvalReport> {
    let preds = predict_all(model, store, samples, threshold)?;
    evaluate_predictions(&preds, samples, model.config.num_classes)
}

pub fn evaluate_predictions(preds: &[Vec<Prediction>], samples: &[Sample], num_classes: usize) -> Result<EvalReport> {
    let dets: Vec<ImageDetections> = samples
        .iter()
        .zip(preds)
        .map(|(s, p)| ImageDetections {
            image_id: s.id,
            detections: p
                .iter()
                .map(|x| Detection { class_id: x.class_id, confidence: x.confidence, mask: x.mask.clone() })
                .collect(),
        })
        .collect();
    let truth: Vec<ImageTruth> =
        samples.iter().map(|s| ImageTruth { image_id: s.id, instances: s.instances.clone() }).collect();
    evaluate(&dets, &truth, num_classes)
}

/// Fraction of samples whose prediction count is within `tolerance` of the
/// ground-truth instance count.
pub fn count_accuracy(preds: &[Vec<Prediction>], samples: &[Sample], tolerance: usize) -> f64 {
    let hits = preds.iter().zip(samples).filter(|(p, s)| p.len().abs_diff(s.instances.len()) <= tolerance).count();
    hits as f64 / samples.len().max(1) as f64
}
