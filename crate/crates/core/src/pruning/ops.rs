//! Pruning operators: importance, quantile masks, Δ adaptation, genetic
//! operators, rewinding and the ranked list.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Shape4;
use crate::trainer::{Grads, Model};

use super::mask::{weighted_sparsity, Mask};

/// Guards `⌊target·S⌋` against targets that land a rounding error below an
/// integer count, e.g. 0.8 − 0.05 = 0.7499999….
const COUNT_EPS: f64 = 1e-9;

/// Number of entries pruned for `target` sparsity of `size` weights.
pub fn pruned_count(target: f64, size: usize) -> usize {
    ((target * size as f64 + COUNT_EPS).floor() as usize).min(size)
}

/// Optimizer description `O` of the pruned-model tuple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Optimizer {
    pub kind: String,
    pub lr: f64,
}

impl Optimizer {
    pub fn sgd(lr: f64) -> Self {
        Optimizer { kind: "sgd".into(), lr }
    }
}

/// The tuple (F_Θ, M, O, G) plus its validation score.
#[derive(Debug, Clone, PartialEq)]
pub struct PrunedModel<T> {
    pub model: Model<T>,
    /// One mask per prunable layer, in [`Model::prunable`] order.
    pub masks: Vec<Mask>,
    pub optimizer: Optimizer,
    /// Mean weight gradients per prunable layer.
    pub grad_stats: Vec<Vec<T>>,
    pub accuracy: f64,
}

impl<T: Scalar> PrunedModel<T> {
    /// All-ones masks and zero gradient statistics.
    pub fn new(model: Model<T>, optimizer: Optimizer) -> Self {
        let masks: Vec<Mask> = model
            .prunable()
            .iter()
            .map(|&i| Mask::ones(model.layers[i].weight().expect("prunable").shape()))
            .collect();
        let grad_stats = masks.iter().map(|m| vec![T::zero(); m.len()]).collect();
        PrunedModel { model, masks, optimizer, grad_stats, accuracy: 0.0 }
    }

    pub fn weighted_sparsity(&self) -> f64 {
        weighted_sparsity(&self.masks)
    }

    pub fn layer_sparsities(&self) -> Vec<f64> {
        self.masks.iter().map(|m| m.sparsity().unwrap_or(0.0)).collect()
    }

    /// Weights of the `k`-th prunable layer.
    pub fn weights(&self, k: usize) -> &[T] {
        let li = self.model.prunable()[k];
        self.model.layers[li].weight().expect("prunable").data()
    }

    /// Re-applies every mask.
    pub fn apply_masks(&mut self) -> Result<()> {
        self.model.apply_masks(&self.masks)
    }

    /// Copies prunable-layer gradients into `grad_stats`.
    pub fn set_grad_stats(&mut self, grads: &Grads<T>) {
        let idx = self.model.prunable();
        self.grad_stats = idx
            .iter()
            .map(|&i| grads.layers[i].as_ref().expect("prunable has grads").weight.clone())
            .collect();
    }
}

/// `G = (1/B)·Σ_j grads_j` over one epoch's batches.
pub fn update_gradient_stats<T: Scalar>(batch_grads: &[Vec<T>]) -> Result<Vec<T>> {
    let first = batch_grads.first().ok_or_else(|| invalid!("gradient statistics need at least one batch"))?;
    let mut g = vec![T::zero(); first.len()];
    for b in batch_grads {
        if b.len() != g.len() {
            return Err(shape_err!("batch gradient of {} values, expected {}", b.len(), g.len()));
        }
        g.iter_mut().zip(b).for_each(|(a, v)| *a += *v);
    }
    let inv = T::one() / T::lit(batch_grads.len() as f64);
    g.iter_mut().for_each(|v| *v *= inv);
    Ok(g)
}

pub fn compute_sensitivity(acc_t: f64, acc_prev: f64) -> f64 {
    acc_t - acc_prev
}

/// Δ_i + sensitivity·Δ_i/β.
pub fn update_delta(delta: f64, sensitivity: f64, beta: f64) -> f64 {
    delta + sensitivity * delta / beta
}

/// g = α·|G| + (1−α)·|θ|, element-wise.
pub fn importance<T: Scalar>(theta: &[T], grad_stats: &[T], alpha: f64) -> Result<Vec<f64>> {
    if theta.len() != grad_stats.len() {
        return Err(shape_err!("{} weights but {} gradient statistics", theta.len(), grad_stats.len()));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(invalid!("alpha {alpha} outside [0, 1]"));
    }
    Ok(theta
        .iter()
        .zip(grad_stats)
        .map(|(t, g)| alpha * g.as_f64().abs() + (1.0 - alpha) * t.as_f64().abs())
        .collect())
}

/// Mask zeroing the `⌊target·S⌋` least important entries. Ties break
/// toward the lower flat index.
pub fn mask_for_sparsity(g: &[f64], shape: Shape4, target: f64) -> Result<Mask> {
    if g.len() != shape.len() {
        return Err(shape_err!("{} importance values for shape {shape}", g.len()));
    }
    let k = pruned_count(target.clamp(0.0, 1.0), g.len());
    let mut bits = vec![1u8; g.len()];
    if k > 0 {
        let mut order: Vec<usize> = (0..g.len()).collect();
        let key = |&i: &usize| (g[i], i);
        if k < order.len() {
            order.select_nth_unstable_by(k - 1, |a, b| key(a).partial_cmp(&key(b)).expect("finite importance"));
        }
        for &i in &order[..k] {
            bits[i] = 0;
        }
    }
    Mask::from_bits(shape, bits)
}

fn remask<T: Scalar>(pm: &mut PrunedModel<T>, k: usize, target: f64, alpha: f64) -> Result<()> {
    let g = importance(pm.weights(k), &pm.grad_stats[k], alpha)?;
    pm.masks[k] = mask_for_sparsity(&g, pm.masks[k].shape(), target)?;
    Ok(())
}

/// Raises the target of each layer in `layers` by its Δ and recomputes the
/// masks. Targets are clamped to `caps`; the returned flags mark clamped
/// layers.
pub fn increment_mask<T: Scalar>(
    pm: &mut PrunedModel<T>,
    layers: &[usize],
    deltas: &[f64],
    alpha: f64,
    targets: &mut [f64],
    caps: &[f64],
) -> Result<Vec<bool>> {
    let mut clamped = Vec::with_capacity(layers.len());
    for &k in layers {
        let mut t = targets[k] + deltas[k];
        let cap = caps.get(k).copied().unwrap_or(1.0).min(1.0);
        clamped.push(t > cap);
        t = t.min(cap);
        targets[k] = t;
        remask(pm, k, t, alpha)?;
    }
    pm.apply_masks()?;
    Ok(clamped)
}

/// Lowers each selected layer's target by α_m·Δ and recomputes its mask.
pub fn mutate<T: Scalar>(
    pm: &mut PrunedModel<T>,
    layers: &[usize],
    alpha_m: f64,
    deltas: &[f64],
    alpha: f64,
    targets: &mut [f64],
) -> Result<()> {
    let alpha_m = alpha_m.clamp(0.0, 1.0);
    for &k in layers {
        targets[k] = (targets[k] - alpha_m * deltas[k]).max(0.0);
        remask(pm, k, targets[k], alpha)?;
    }
    pm.apply_masks()
}

/// Replaces the masks of `layers` with the donor's.
pub fn crossover<T: Scalar>(pm: &mut PrunedModel<T>, donor: &[Mask], layers: &[usize], targets: &mut [f64]) -> Result<()> {
    if donor.len() != pm.masks.len() {
        return Err(shape_err!("donor has {} masks, model {}", donor.len(), pm.masks.len()));
    }
    for &k in layers {
        if donor[k].shape() != pm.masks[k].shape() {
            return Err(shape_err!("donor mask {} does not fit {}", donor[k].shape(), pm.masks[k].shape()));
        }
        pm.masks[k] = donor[k].clone();
        targets[k] = donor[k].sparsity()?;
    }
    pm.apply_masks()
}

/// Restores every unmasked weight from `snapshot`; masked weights stay 0.
/// Biases are restored too.
pub fn rewind<T: Scalar>(pm: &mut PrunedModel<T>, snapshot: &Model<T>) -> Result<()> {
    if snapshot.layers.len() != pm.model.layers.len() {
        return Err(shape_err!("snapshot does not match the model"));
    }
    for (l, s) in pm.model.layers.iter_mut().zip(&snapshot.layers) {
        if let (Some(w), Some(sw)) = (l.weight_mut(), s.weight()) {
            w.data_mut().copy_from_slice(sw.data());
        }
        if let (Some(b), Some(sb)) = (l.bias_mut(), s.bias()) {
            b.copy_from_slice(sb);
        }
    }
    pm.apply_masks()
}

/// Ordering key: accuracy, then weighted sparsity.
fn rank_key<T: Scalar>(pm: &PrunedModel<T>) -> (f64, f64) {
    (pm.accuracy, pm.weighted_sparsity())
}

/// Bounded elite archive, best first.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList<T> {
    pub capacity: usize,
    pub entries: Vec<PrunedModel<T>>,
}

impl<T: Scalar> RankedList<T> {
    pub fn new(capacity: usize) -> Self {
        RankedList { capacity: capacity.max(1), entries: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn worst_accuracy(&self) -> Option<f64> {
        self.entries.last().map(|e| e.accuracy)
    }

    /// Inserts a copy of `candidate` when the list has room or the
    /// candidate outranks the worst entry, which is then evicted. Entries
    /// compare by accuracy, then weighted sparsity.
    pub fn update(&mut self, candidate: &PrunedModel<T>) -> bool {
        let key = rank_key(candidate);
        let full = self.entries.len() >= self.capacity;
        if full && self.entries.last().is_some_and(|w| key <= rank_key(w)) {
            return false;
        }
        let pos = self.entries.iter().position(|e| key > rank_key(e)).unwrap_or(self.entries.len());
        self.entries.insert(pos, candidate.clone());
        self.entries.truncate(self.capacity);
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::{Init, LayerSpec, ModelSpec};

    fn flat(n: usize) -> Shape4 {
        Shape4::new(n, 1, 1, 1)
    }

    fn tiny() -> PrunedModel<f64> {
        let spec = ModelSpec {
            init: Init::Glorot,
            input: [4, 1, 1],
            layers: vec![LayerSpec::Dense { units: 3 }, LayerSpec::Relu, LayerSpec::Dense { units: 2 }, LayerSpec::SoftmaxXent],
        };
        PrunedModel::new(Model::build(&spec, 1).unwrap(), Optimizer::sgd(0.01))
    }

    #[test]
    fn delta_update_examples() {
        assert!((update_delta(0.05, 0.01, 10.0) - 0.05005).abs() < 1e-15);
        assert_eq!(update_delta(0.05, 0.0, 10.0), 0.05);
        assert!((update_delta(0.05, -0.1, 10.0) - 0.0495).abs() < 1e-15);
        assert!((compute_sensitivity(0.91, 0.90) - 0.01).abs() < 1e-12);
        assert!((compute_sensitivity(0.88, 0.90) + 0.02).abs() < 1e-12);
    }

    #[test]
    fn importance_examples() {
        let theta = [-2.0f64, 0.5];
        let g = [10.0f64, -1.0];
        assert_eq!(importance(&theta, &g, 0.0).unwrap(), vec![2.0, 0.5]);
        assert_eq!(importance(&theta, &g, 1.0).unwrap(), vec![10.0, 1.0]);
        assert!((importance(&theta[..1], &g[..1], 0.1).unwrap()[0] - 2.8).abs() < 1e-12);
        assert!(importance(&theta, &g[..1], 0.1).is_err());
    }

    #[test]
    fn quantile_mask_examples() {
        let g = [0.9, 0.5, 0.3, 0.1];
        assert_eq!(mask_for_sparsity(&g, flat(4), 0.25 + 0.25).unwrap().bits(), &[1, 1, 0, 0]);
        assert_eq!(mask_for_sparsity(&[0.2, 0.1, 0.2, 0.2], flat(4), 0.5).unwrap().bits(), &[0, 0, 1, 1]);
        assert_eq!(mask_for_sparsity(&g, flat(4), 1.0).unwrap().bits(), &[0; 4]);
        assert_eq!(mask_for_sparsity(&g, flat(4), 0.0).unwrap().bits(), &[1; 4]);
        // 0.8 − 0.05 is a hair below 0.75
        assert_eq!(mask_for_sparsity(&g, flat(4), 0.8 - 0.05).unwrap().pruned(), 3);
    }

    #[test]
    fn gradient_stats_mean() {
        let g = update_gradient_stats(&[vec![1.0, -2.0], vec![-1.0, 2.0]]).unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
        assert_eq!(update_gradient_stats(&[vec![3.0f64]]).unwrap(), vec![3.0]);
        assert!(update_gradient_stats::<f64>(&[]).is_err());
    }

    #[test]
    fn increment_and_mutate_targets() {
        let mut pm = tiny();
        let mut targets = vec![0.25, 0.0];
        let deltas = vec![0.25, 0.5];
        let flags = increment_mask(&mut pm, &[0, 1], &deltas, 0.1, &mut targets, &[1.0, 0.4]).unwrap();
        assert_eq!(flags, vec![false, true]);
        assert_eq!(targets, vec![0.5, 0.4]);
        assert_eq!(pm.masks[0].pruned(), 6);
        assert_eq!(pm.masks[1].pruned(), 2);
        let mut targets = vec![0.8, 0.4];
        mutate(&mut pm, &[0], 0.5, &[0.1, 0.1], 0.1, &mut targets).unwrap();
        assert!((targets[0] - 0.75).abs() < 1e-12);
        assert_eq!(pm.masks[0].pruned(), 9);
        let before = pm.masks.clone();
        mutate(&mut pm, &[0], 0.0, &[0.1, 0.1], 0.1, &mut targets).unwrap();
        assert_eq!(pm.masks, before);
    }

    #[test]
    fn crossover_splices() {
        let mut pm = tiny();
        let donor: Vec<Mask> = pm.masks.iter().map(|m| Mask::from_bits(m.shape(), vec![0; m.len()]).unwrap()).collect();
        let original = pm.masks.clone();
        let mut targets = vec![0.0, 0.0];
        crossover(&mut pm, &donor, &[], &mut targets).unwrap();
        assert_eq!(pm.masks, original);
        crossover(&mut pm, &donor, &[1], &mut targets).unwrap();
        assert_eq!(pm.masks[1], donor[1]);
        assert_eq!(pm.masks[0], original[0]);
        assert_eq!(targets, vec![0.0, 1.0]);
        crossover(&mut pm, &donor, &[0, 1], &mut targets).unwrap();
        assert_eq!(pm.masks, donor);
        assert!(pm.weights(0).iter().all(|&w| w == 0.0));
    }

    #[test]
    fn rewind_selects_snapshot_or_zero() {
        let mut pm = tiny();
        let snapshot = pm.model.clone();
        for l in &mut pm.model.layers {
            if let Some(w) = l.weight_mut() {
                w.data_mut().iter_mut().for_each(|v| *v += 1.0);
            }
        }
        rewind(&mut pm, &snapshot).unwrap();
        assert_eq!(pm.model, snapshot);
        pm.masks[0] = Mask::from_bits(pm.masks[0].shape(), (0..12).map(|i| (i % 2) as u8).collect()).unwrap();
        rewind(&mut pm, &snapshot).unwrap();
        let snap_w = snapshot.layers[0].weight().unwrap().data();
        for (i, (&w, &s)) in pm.weights(0).iter().zip(snap_w).enumerate() {
            assert_eq!(w, if i % 2 == 1 { s } else { 0.0 });
        }
    }

    #[test]
    fn ranked_list_rules() {
        let base = tiny();
        let with = |acc: f64| {
            let mut p = base.clone();
            p.accuracy = acc;
            p
        };
        let mut r = RankedList::new(3);
        assert!(r.update(&with(0.5)));
        assert!(r.update(&with(0.7)));
        assert!(r.update(&with(0.6)));
        assert!(!r.update(&with(0.4)));
        assert!(!r.update(&with(0.5)));
        assert!(r.update(&with(0.65)));
        let accs: Vec<f64> = r.entries.iter().map(|e| e.accuracy).collect();
        assert_eq!(accs, vec![0.7, 0.65, 0.6]);
        let mut sparser = with(0.6);
        sparser.masks[0] = Mask::from_bits(sparser.masks[0].shape(), vec![0; 12]).unwrap();
        assert!(r.update(&sparser));
        assert_eq!(r.entries[2].weighted_sparsity(), sparser.weighted_sparsity());
    }
}
