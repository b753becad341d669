//! Evolutionary pruning with masked retraining and rewinding.

mod mask;
mod ops;
mod search;

pub use mask::{apply_mask, layer_sparsity, weighted_sparsity, Mask};
pub use ops::{
    compute_sensitivity, crossover, importance, increment_mask, mask_for_sparsity, mutate,
    pruned_count, rewind, update_delta, update_gradient_stats, Optimizer, PrunedModel, RankedList,
};
pub use search::{
    prune_finish, prune_init, prune_loop, prune_step, HistoryRow, Operator, PerLayer, PruneHyper,
    PruneState,
};
