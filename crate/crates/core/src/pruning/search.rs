//! The evolutionary pruning loop.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::scalar::Scalar;
use crate::trainer::{evaluate, train_epoch, Dataset, InferenceOptions, Model, Sgd, SplitKind, TrainingConfig};

use super::ops::{
    compute_sensitivity, crossover, increment_mask, mask_for_sparsity, importance, mutate,
    pruned_count, rewind, update_delta, Optimizer, PrunedModel, RankedList,
};

/// A scalar applied to every prunable layer, or one value per layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PerLayer {
    Uniform(f64),
    Each(Vec<f64>),
}

impl PerLayer {
    pub fn expand(&self, layers: usize) -> Result<Vec<f64>> {
        match self {
            PerLayer::Uniform(v) => Ok(vec![*v; layers]),
            PerLayer::Each(v) if v.len() == layers => Ok(v.clone()),
            PerLayer::Each(v) => Err(invalid!("{} per-layer values for {layers} prunable layers", v.len())),
        }
    }
}

fn d_epsilon() -> f64 {
    -0.002
}
fn d_alpha() -> f64 {
    0.1
}
fn d_beta() -> f64 {
    10.0
}
fn d_gamma() -> f64 {
    0.5
}
fn d_step() -> PerLayer {
    PerLayer::Uniform(0.05)
}
fn d_caps() -> PerLayer {
    PerLayer::Uniform(1.0)
}
fn d_ranked() -> usize {
    16
}
fn d_iterations() -> usize {
    100
}
fn d_layers() -> usize {
    1
}

/// Hyperparameters of the search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneHyper {
    /// Sensitivity above which an iteration counts as progress (ε).
    #[serde(default = "d_epsilon")]
    pub epsilon: f64,
    /// Importance blend weight (α).
    #[serde(default = "d_alpha")]
    pub alpha: f64,
    /// Δ scaling divisor (β).
    #[serde(default = "d_beta")]
    pub beta: f64,
    /// Genetic gate (γ): mutate when p > γ, crossover otherwise.
    #[serde(default = "d_gamma")]
    pub gamma: f64,
    /// Initial sparsity step Δ.
    #[serde(default = "d_step")]
    pub delta: PerLayer,
    #[serde(default = "d_step")]
    pub initial_sparsity: PerLayer,
    /// Per-layer sparsity thresholds; targets never exceed them.
    #[serde(default = "d_caps")]
    pub caps: PerLayer,
    /// Ranked list length (R_L).
    #[serde(default = "d_ranked")]
    pub ranked_len: usize,
    /// N_it.
    #[serde(default = "d_iterations")]
    pub iterations: usize,
    /// |l|, layers sampled per iteration.
    #[serde(default = "d_layers")]
    pub layers_per_iteration: usize,
    /// Training batches per iteration; `None` runs a full epoch.
    #[serde(default)]
    pub batches_per_iteration: Option<usize>,
}

impl Default for PruneHyper {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults parse")
    }
}

impl PruneHyper {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(invalid!("alpha must lie in [0, 1]"));
        }
        if self.beta <= 0.0 {
            return Err(invalid!("beta must be positive"));
        }
        if self.ranked_len == 0 || self.layers_per_iteration == 0 {
            return Err(invalid!("ranked list length and layers per iteration must be at least 1"));
        }
        Ok(())
    }
}

/// What an iteration did to the masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Operator {
    Increment,
    Mutate,
    Crossover,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub iteration: usize,
    pub layers: Vec<usize>,
    pub loss: f64,
    pub accuracy: f64,
    pub sensitivity: f64,
    pub operator: Operator,
    /// Sparsity after the iteration's mask change.
    pub weighted_sparsity: f64,
    pub layer_sparsity: Vec<f64>,
}

/// Everything needed to continue a search exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneState<T> {
    pub iteration: usize,
    pub current: PrunedModel<T>,
    pub targets: Vec<f64>,
    pub deltas: Vec<f64>,
    pub caps: Vec<f64>,
    pub acc_prev: f64,
    pub ranked: RankedList<T>,
    /// Latest sensitivity seen by each prunable layer.
    pub sensitivity: Vec<f64>,
    pub history: Vec<HistoryRow>,
    pub rng: ChaCha8Rng,
}

fn score<T: Scalar>(model: &Model<T>, data: &Dataset<T>) -> Result<f64> {
    Ok(evaluate(model, data, SplitKind::Validation, &InferenceOptions::binary32())?.score())
}

/// Applies the initial sparsity (by weight magnitude) and scores the model.
pub fn prune_init<T: Scalar>(
    model: Model<T>,
    data: &Dataset<T>,
    hyper: &PruneHyper,
    training: &TrainingConfig,
    seed: u64,
) -> Result<PruneState<T>> {
    hyper.validate()?;
    let mut current = PrunedModel::new(model, Optimizer::sgd(training.lr));
    let n = current.masks.len();
    let caps = hyper.caps.expand(n)?;
    let mut targets = hyper.initial_sparsity.expand(n)?;
    for k in 0..n {
        targets[k] = targets[k].clamp(0.0, caps[k].min(1.0));
        let g = importance(current.weights(k), &current.grad_stats[k], hyper.alpha)?;
        current.masks[k] = mask_for_sparsity(&g, current.masks[k].shape(), targets[k])?;
    }
    current.apply_masks()?;
    current.accuracy = score(&current.model, data)?;
    Ok(PruneState {
        iteration: 0,
        acc_prev: current.accuracy,
        current,
        targets,
        deltas: hyper.delta.expand(n)?,
        caps,
        ranked: RankedList::new(hyper.ranked_len),
        sensitivity: vec![0.0; n],
        history: Vec::new(),
        rng: ChaCha8Rng::seed_from_u64(seed),
    })
}

impl<T: Scalar> PruneState<T> {
    fn at_cap(&self, k: usize) -> bool {
        let size = self.current.masks[k].len();
        pruned_count(self.targets[k], size) >= pruned_count(self.caps[k].min(1.0), size)
    }

    /// Whether every layer has reached its sparsity threshold.
    pub fn meets_caps(&self, pm: &PrunedModel<T>) -> bool {
        pm.masks.iter().zip(&self.caps).all(|(m, &c)| m.pruned() >= pruned_count(c.min(1.0), m.len()))
    }
}

/// One iteration: sample layers, retrain under masks, score, then either
/// grow sparsity or apply a genetic operator and rewind.
pub fn prune_step<T: Scalar>(
    state: &mut PruneState<T>,
    data: &Dataset<T>,
    hyper: &PruneHyper,
    training: &TrainingConfig,
) -> Result<()> {
    let n = state.current.masks.len();
    let mut eligible: Vec<usize> = (0..n).filter(|&k| !state.at_cap(k)).collect();
    if eligible.is_empty() {
        eligible = (0..n).collect();
    }
    let mut layers: Vec<usize> = eligible
        .choose_multiple(&mut state.rng, hyper.layers_per_iteration.min(eligible.len()))
        .copied()
        .collect();
    layers.sort_unstable();

    let snapshot = state.current.model.clone();
    let mut train_rng = ChaCha8Rng::seed_from_u64(state.rng.gen());
    let pm = &mut state.current;
    let summary = train_epoch(
        &mut pm.model,
        &data.train,
        training.batch_size,
        Sgd { lr: pm.optimizer.lr, clip_norm: training.clip_norm },
        Some(&pm.masks),
        &mut train_rng,
        hyper.batches_per_iteration,
    )?;
    pm.set_grad_stats(&summary.mean_grads);
    pm.accuracy = score(&pm.model, data)?;
    let acc_t = pm.accuracy;
    let s = compute_sensitivity(acc_t, state.acc_prev);
    state.acc_prev = acc_t;
    for &k in &layers {
        state.sensitivity[k] = s;
        state.deltas[k] = update_delta(state.deltas[k], s, hyper.beta);
    }

    let operator = if s > hyper.epsilon {
        state.ranked.update(&state.current);
        increment_mask(&mut state.current, &layers, &state.deltas, hyper.alpha, &mut state.targets, &state.caps)?;
        Operator::Increment
    } else {
        let p: f64 = state.rng.gen();
        let alpha_m: f64 = state.rng.gen();
        let op = if p > hyper.gamma || state.ranked.is_empty() {
            mutate(&mut state.current, &layers, alpha_m, &state.deltas, hyper.alpha, &mut state.targets)?;
            Operator::Mutate
        } else {
            let r = state.rng.gen_range(0..state.ranked.len());
            let donor = state.ranked.entries[r].masks.clone();
            crossover(&mut state.current, &donor, &layers, &mut state.targets)?;
            Operator::Crossover
        };
        rewind(&mut state.current, &snapshot)?;
        op
    };
    state.history.push(HistoryRow {
        iteration: state.iteration,
        layers,
        loss: summary.mean_loss,
        accuracy: acc_t,
        sensitivity: s,
        operator,
        weighted_sparsity: state.current.weighted_sparsity(),
        layer_sparsity: state.current.layer_sparsities(),
    });
    state.iteration += 1;
    log::debug!(
        "iteration {} acc {:.4} sensitivity {:+.4} {:?} sparsity {:.4}",
        state.iteration,
        acc_t,
        s,
        operator,
        state.current.weighted_sparsity()
    );
    Ok(())
}

/// Scores the current model and picks the result: the best candidate
/// (ranked entries plus the current model) that reaches every sparsity
/// threshold, or the best candidate overall when none does. Candidates
/// compare by accuracy, then weighted sparsity.
pub fn prune_finish<T: Scalar>(state: &PruneState<T>, data: &Dataset<T>) -> Result<PrunedModel<T>> {
    let mut current = state.current.clone();
    current.accuracy = score(&current.model, data)?;
    let mut candidates: Vec<&PrunedModel<T>> = state.ranked.entries.iter().collect();
    candidates.push(&current);
    let key = |p: &&PrunedModel<T>| (p.accuracy, p.weighted_sparsity());
    let best = |c: &mut dyn Iterator<Item = &PrunedModel<T>>| {
        c.max_by(|a, b| key(a).partial_cmp(&key(b)).expect("finite scores")).cloned()
    };
    let capped = best(&mut candidates.iter().copied().filter(|p| state.meets_caps(p)));
    Ok(capped.or_else(|| best(&mut candidates.iter().copied())).expect("current is a candidate"))
}

/// Runs the whole search and returns the selected pruned model.
pub fn prune_loop<T: Scalar>(
    model: Model<T>,
    data: &Dataset<T>,
    hyper: &PruneHyper,
    training: &TrainingConfig,
    seed: u64,
) -> Result<PrunedModel<T>> {
    let mut state = prune_init(model, data, hyper, training, seed)?;
    while state.iteration < hyper.iterations {
        prune_step(&mut state, data, hyper, training)?;
    }
    prune_finish(&state, data)
}
