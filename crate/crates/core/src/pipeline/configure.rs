//! Per-layer backend selection from a bench report.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::PrecisionMode;

use super::bench::BenchRow;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Sparse,
    Dense,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerChoice {
    pub layer_id: String,
    pub sparsity_pct: f64,
    pub precision: PrecisionMode,
    pub backend: Backend,
    /// Median time of the chosen backend.
    pub time_ms: f64,
    /// Sub-batch to run the sparse engine with.
    pub sb_s: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub layers: Vec<LayerChoice>,
}

impl BackendConfig {
    pub fn sparse_count(&self) -> usize {
        self.layers.iter().filter(|l| l.backend == Backend::Sparse).count()
    }
}

/// The faster engine of one row; equal medians choose dense.
pub fn choose(row: &BenchRow) -> Backend {
    if row.sparse_ms < row.dense_ms {
        Backend::Sparse
    } else {
        Backend::Dense
    }
}

/// One choice per report row. Every id in `required` must have a row.
pub fn configure(rows: &[BenchRow], required: &[String]) -> Result<BackendConfig> {
    let missing: Vec<&str> = required
        .iter()
        .filter(|id| !rows.iter().any(|r| &r.layer_id == *id))
        .map(String::as_str)
        .collect();
    if !missing.is_empty() {
        return Err(Error::Config(format!("bench report has no rows for layers {missing:?}")));
    }
    let layers = rows
        .iter()
        .map(|r| {
            let backend = choose(r);
            LayerChoice {
                layer_id: r.layer_id.clone(),
                sparsity_pct: r.sparsity_pct,
                precision: r.precision,
                backend,
                time_ms: match backend {
                    Backend::Sparse => r.sparse_ms,
                    Backend::Dense => r.dense_ms,
                },
                sb_s: r.sb_s,
            }
        })
        .collect();
    Ok(BackendConfig { layers })
}
