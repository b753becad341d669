//! Evaluation: top1 for classifiers, F1 on reconstruction error for
//! anomaly detectors.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::scalar::Scalar;

use super::data::{Dataset, Split, SplitKind, Task};
use super::model::{Head, InferenceOptions, Model};

/// Samples per evaluation chunk.
const EVAL_CHUNK: usize = 64;

/// Confusion counts of the anomaly class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn from_predictions(predicted: &[bool], actual: &[bool]) -> Self {
        let mut c = Confusion { tp: 0, fp: 0, fn_: 0 };
        for (&p, &a) in predicted.iter().zip(actual) {
            match (p, a) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => {}
            }
        }
        c
    }

    /// 2TP / (2TP + FP + FN); 1.0 when there is nothing to find and
    /// nothing was flagged.
    pub fn f1(&self) -> f64 {
        let den = 2 * self.tp + self.fp + self.fn_;
        if den == 0 {
            1.0
        } else {
            2.0 * self.tp as f64 / den as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub top1: Option<f64>,
    pub confusion: Option<Confusion>,
    pub f1: Option<f64>,
    /// Reconstruction-error threshold used for F1.
    pub threshold: Option<f64>,
    pub loss: f64,
}

impl EvalReport {
    /// The task's headline metric: top1 or F1.
    pub fn score(&self) -> f64 {
        self.top1.or(self.f1).unwrap_or(0.0)
    }
}

/// Fraction of rows whose argmax matches the label (first index wins ties).
pub fn top1(logits: &[f64], classes: usize, labels: &[u16]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = logits
        .chunks_exact(classes)
        .zip(labels)
        .filter(|(row, &l)| {
            let mut best = 0;
            for k in 1..classes {
                if row[k] > row[best] {
                    best = k;
                }
            }
            best == l as usize
        })
        .count();
    hits as f64 / labels.len() as f64
}

/// mean + 3·stddev (population) of `errors`.
pub fn anomaly_threshold(errors: &[f64]) -> f64 {
    let n = errors.len().max(1) as f64;
    let mean = errors.iter().sum::<f64>() / n;
    let var = errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n;
    mean + 3.0 * var.sqrt()
}

/// Network outputs and per-sample losses, chunked in parallel.
fn outputs<T: Scalar>(model: &Model<T>, split: &Split<T>, opts: &InferenceOptions<T>) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = split.len();
    let with_labels = model.head == Head::SoftmaxXent;
    let parts: Vec<Result<(Vec<f64>, Vec<f64>)>> = (0..n.div_ceil(EVAL_CHUNK))
        .into_par_iter()
        .map(|k| {
            let r = k * EVAL_CHUNK..((k + 1) * EVAL_CHUNK).min(n);
            let chunk = split.slice(r);
            let out = model.forward_with(&chunk.x, opts, None)?;
            let m = out.shape().sample_len();
            let mut losses = Vec::with_capacity(chunk.len());
            for b in 0..chunk.len() {
                let o = out.sample(b);
                if with_labels {
                    let o: Vec<f64> = o.iter().map(|v| v.as_f64()).collect();
                    let zmax = o.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let lse = o.iter().map(|v| (v - zmax).exp()).sum::<f64>().ln() + zmax;
                    losses.push(lse - o[chunk.labels[b] as usize]);
                } else {
                    let se: f64 = o.iter().zip(chunk.x.sample(b)).map(|(p, t)| (p.as_f64() - t.as_f64()).powi(2)).sum();
                    losses.push(se / m as f64);
                }
            }
            Ok((out.data().iter().map(|v| v.as_f64()).collect(), losses))
        })
        .collect();
    let (mut out, mut losses) = (Vec::new(), Vec::new());
    for p in parts {
        let (o, l) = p?;
        out.extend(o);
        losses.extend(l);
    }
    Ok((out, losses))
}

/// Scores `kind` of `data`. Anomaly thresholds always come from the
/// validation split's reconstruction errors.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    data: &Dataset<T>,
    kind: SplitKind,
    opts: &InferenceOptions<T>,
) -> Result<EvalReport> {
    let split = data.split(kind);
    if split.is_empty() {
        return Err(invalid!("cannot evaluate an empty {kind:?} split"));
    }
    let (out, losses) = outputs(model, split, opts)?;
    let loss = losses.iter().sum::<f64>() / losses.len() as f64;
    match data.task {
        Task::Classification { classes } => Ok(EvalReport {
            top1: Some(top1(&out, classes, &split.labels)),
            confusion: None,
            f1: None,
            threshold: None,
            loss,
        }),
        Task::Anomaly => {
            let threshold = if kind == SplitKind::Validation {
                anomaly_threshold(&losses)
            } else {
                anomaly_threshold(&outputs(model, &data.validation, opts)?.1)
            };
            let predicted: Vec<bool> = losses.iter().map(|&e| e > threshold).collect();
            let actual: Vec<bool> = split.labels.iter().map(|&l| l == 1).collect();
            let c = Confusion::from_predictions(&predicted, &actual);
            Ok(EvalReport { top1: None, confusion: Some(c), f1: Some(c.f1()), threshold: Some(threshold), loss })
        }
    }
}
