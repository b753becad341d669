//! Minibatch SGD epochs.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::pruning::Mask;
use crate::scalar::Scalar;

use super::data::Split;
use super::model::{Grads, Model};

fn default_batch() -> usize {
    128
}

fn default_lr() -> f64 {
    0.01
}

fn default_epochs() -> usize {
    10
}

/// Dense pre-training and retraining parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    /// Rescale each minibatch gradient to at most this global L2 norm.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip_norm: Option<f64>,
}

impl TrainingConfig {
    pub fn sgd(&self) -> Sgd {
        Sgd { lr: self.lr, clip_norm: self.clip_norm }
    }
}

/// Plain SGD step rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub clip_norm: Option<f64>,
}

impl Sgd {
    pub fn plain(lr: f64) -> Self {
        Sgd { lr, clip_norm: None }
    }

    /// Learning rate for a gradient of global norm `norm`.
    fn effective_lr(&self, norm: f64) -> f64 {
        match self.clip_norm {
            Some(c) if norm > c => self.lr * c / norm,
            _ => self.lr,
        }
    }
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig { epochs: default_epochs(), batch_size: default_batch(), lr: default_lr(), clip_norm: None }
    }
}

#[derive(Debug, Clone)]
pub struct EpochSummary<T> {
    pub mean_loss: f64,
    /// Element-wise mean of the per-batch gradients.
    pub mean_grads: Grads<T>,
    pub batches: usize,
}

/// One pass over a shuffled `split`, stopping after `max_batches` if set.
/// Masks are re-applied after every step. Gradient statistics are
/// accumulated before clipping.
pub fn train_epoch<T: Scalar>(
    model: &mut Model<T>,
    split: &Split<T>,
    batch_size: usize,
    sgd: Sgd,
    masks: Option<&[Mask]>,
    rng: &mut ChaCha8Rng,
    max_batches: Option<usize>,
) -> Result<EpochSummary<T>> {
    if batch_size == 0 || sgd.lr <= 0.0 || sgd.clip_norm.is_some_and(|c| c <= 0.0) {
        return Err(invalid!("batch size, learning rate and clip norm must be positive"));
    }
    if split.is_empty() {
        return Err(invalid!("training split is empty"));
    }
    let mut order: Vec<usize> = (0..split.len()).collect();
    order.shuffle(rng);
    let mut sum = Grads::zeros_like(model);
    let mut loss = 0.0;
    let mut batches = 0;
    for idx in order.chunks(batch_size).take(max_batches.unwrap_or(usize::MAX)) {
        let batch = split.gather(idx);
        let (l, g) = model.gradients(&batch.x, &batch.labels)?;
        model.sgd_step(&g, T::lit(sgd.effective_lr(g.norm())), masks)?;
        sum.add_assign(&g);
        loss += l.as_f64();
        batches += 1;
    }
    sum.scale(T::one() / T::lit(batches as f64));
    Ok(EpochSummary { mean_loss: loss / batches as f64, mean_grads: sum, batches })
}

/// Runs `config.epochs` epochs; returns the mean loss of each.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    split: &Split<T>,
    config: &TrainingConfig,
    masks: Option<&[Mask]>,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    (0..config.epochs)
        .map(|_| train_epoch(model, split, config.batch_size, config.sgd(), masks, rng, None).map(|s| s.mean_loss))
        .collect()
}
