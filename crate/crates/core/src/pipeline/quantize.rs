//! The quantize command: every requested mode applied to a pruned
//! checkpoint, with an accuracy-delta report.
//!
//! Output layout under the target directory:
//!
//! - `quantize_report.csv` / `quantize_report.md`: one row per mode.
//! - `quantized/<mode>/model.bin`: parameters in the mode's storage
//!   precision, plus `quant.json` (mode, report row, activation
//!   saturation thresholds).
//! - `quantized/4b-16b/codebooks/layer_<i>.json` and `layer_<i>.bin`:
//!   centroids and fixed-point parameters, and one assignment byte per
//!   weight, for every prunable layer `i`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::quant::{quantize_and_report, FixedPointParams, QuantMode, QuantReport};
use crate::sparse::{hex, worker_pool};
use crate::trainer::SplitKind;

use super::checkpoint::{load_selected, write_params, MODEL_BLOB};
use super::prune::load_data;

/// One report row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantRow {
    pub model: String,
    pub mode: QuantMode,
    pub split: SplitKind,
    pub baseline: f64,
    pub quantized: f64,
    pub delta_points: f64,
    pub weighted_sparsity_before: f64,
    pub weighted_sparsity_after: f64,
}

impl QuantRow {
    fn new(model: &str, r: &QuantReport) -> Self {
        QuantRow {
            model: model.into(),
            mode: r.mode,
            split: r.split,
            baseline: r.baseline,
            quantized: r.quantized,
            delta_points: r.delta_points,
            weighted_sparsity_before: r.weighted_sparsity_before,
            weighted_sparsity_after: r.weighted_sparsity_after,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct QuantManifest {
    mode: QuantMode,
    report: QuantRow,
    /// Per-layer activation clamp, `null` where none applies.
    saturation: Vec<Option<f32>>,
    model_sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CodebookFile {
    layer: usize,
    omega: usize,
    psi: u32,
    zero_pinned: bool,
    centroids: Vec<f64>,
    quantized: Vec<f64>,
    params: FixedPointParams,
    cost: f64,
    weights: usize,
    assignments_sha256: String,
}

/// Directory name of a mode, e.g. `4b-16b`.
pub fn mode_slug(mode: QuantMode) -> String {
    mode.name().replace('/', "-")
}

/// Quantises the model selected in `checkpoint` in every mode and writes
/// the artifacts under `out`.
pub fn run_quantize(checkpoint: &Path, modes: &[QuantMode], split: SplitKind, workers: usize, out: &Path) -> Result<Vec<QuantRow>> {
    if modes.is_empty() {
        return Err(Error::Config("no quantisation mode requested".into()));
    }
    worker_pool(workers).install(|| {
        let (manifest, model, _) = load_selected(checkpoint)?;
        let data = load_data(&manifest.config)?;
        let name = manifest.config.name.clone().unwrap_or_else(|| "model".into());
        let mut rows = Vec::new();
        for &mode in modes {
            let (q, report) = quantize_and_report(&model, mode, &data, split)?;
            log::info!("{mode}: {:.4} -> {:.4} ({:+.2} points)", report.baseline, report.quantized, report.delta_points);
            let row = QuantRow::new(&name, &report);
            let dir = out.join("quantized").join(mode_slug(mode));
            fs::create_dir_all(&dir)?;
            let mut blob = Vec::new();
            write_params(&mut blob, &q.model)?;
            fs::write(dir.join(MODEL_BLOB), &blob)?;
            let qm = QuantManifest {
                mode,
                report: row.clone(),
                saturation: q.options.saturation.clone(),
                model_sha256: hex(&Sha256::digest(&blob)),
            };
            fs::write(dir.join("quant.json"), serde_json::to_string_pretty(&qm)?)?;
            if !q.codebooks.is_empty() {
                let cb_dir = dir.join("codebooks");
                fs::create_dir_all(&cb_dir)?;
                for (cb, li) in q.codebooks.iter().zip(model.prunable()) {
                    let bytes = cb.assignment_bytes()?;
                    fs::write(cb_dir.join(format!("layer_{li}.bin")), &bytes)?;
                    let file = CodebookFile {
                        layer: li,
                        omega: cb.omega,
                        psi: cb.psi,
                        zero_pinned: cb.zero_pinned,
                        centroids: cb.centroids.clone(),
                        quantized: cb.quantized.clone(),
                        params: cb.params,
                        cost: cb.cost,
                        weights: bytes.len(),
                        assignments_sha256: hex(&Sha256::digest(&bytes)),
                    };
                    fs::write(cb_dir.join(format!("layer_{li}.json")), serde_json::to_string_pretty(&file)?)?;
                }
            }
            rows.push(row);
        }
        write_report(out, &rows)?;
        Ok(rows)
    })
}

fn write_report(out: &Path, rows: &[QuantRow]) -> Result<()> {
    fs::create_dir_all(out)?;
    let mut w = csv::Writer::from_path(out.join("quantize_report.csv")).map_err(|e| Error::Format(e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush()?;
    let mut md = String::new();
    let _ = writeln!(md, "| model | mode | split | baseline | quantized | Δ points | sparsity before | sparsity after |");
    let _ = writeln!(md, "|---|---|---|---:|---:|---:|---:|---:|");
    for r in rows {
        let _ = writeln!(
            md,
            "| {} | {} | {:?} | {:.4} | {:.4} | {:+.2} | {:.4} | {:.4} |",
            r.model,
            r.mode,
            r.split,
            r.baseline,
            r.quantized,
            r.delta_points,
            r.weighted_sparsity_before,
            r.weighted_sparsity_after
        );
    }
    fs::write(out.join("quantize_report.md"), md)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slugs_are_path_safe() {
        assert_eq!(mode_slug(QuantMode::Codebook), "4b-16b");
        assert_eq!(mode_slug(QuantMode::Half), "16b-16b");
        assert_eq!(mode_slug(QuantMode::Passthrough), "passthrough");
    }
}
