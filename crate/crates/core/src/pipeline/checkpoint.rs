//! Pruning checkpoints.
//!
//! A checkpoint directory holds:
//!
//! - `manifest.json`: the effective configuration, baseline and result
//!   scores, the search state (targets, Δ, thresholds, sensitivity, RNG),
//!   the full history, and a SHA-256 for every blob.
//! - `model.bin` / `masks.bin`: parameters and bit-packed masks of the
//!   selected model (the current search model while unfinished).
//! - `state/current.bin`, `state/ranked-NNN.bin`: the resumable search
//!   population, each blob holding parameters, masks and gradient
//!   statistics.
//! - `history.csv`: one row per iteration.
//!
//! Blobs are little-endian. Parameter blob: magic `UPRM`, u32 layer count,
//! then per parameterised layer a tensor (see [`crate::tensor::write_tensor`]),
//! a u32 bias length and the bias values in the weight's precision. Mask
//! blob: magic `UMSK`, u32 count, then per mask a u32 bit count and the
//! packed bytes (LSB first). State blobs concatenate a parameter blob, a
//! mask blob, magic `UGRD` with u32 count and per layer u32 length plus
//! binary32 values, and the accuracy as f64.
//!
//! Nothing time-dependent is recorded, so identical runs give identical
//! bytes.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::pruning::{HistoryRow, Mask, Optimizer, PruneState, PrunedModel, RankedList};
use crate::sparse::hex;
use crate::tensor::io_helpers::{read_u32, read_values, write_u32, write_values};
use crate::tensor::{read_tensor, write_tensor, PrecisionMode};
use crate::trainer::Model;

use super::config::PipelineConfig;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
pub const MODEL_BLOB: &str = "model.bin";
pub const MASK_BLOB: &str = "masks.bin";
pub const HISTORY_CSV: &str = "history.csv";
const STATE_DIR: &str = "state";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub validation: f64,
    pub test: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedMeta {
    pub file: String,
    pub accuracy: f64,
    pub weighted_sparsity: f64,
}

/// Scalar part of [`PruneState`]; models live in the state blobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSnapshot {
    pub iteration: usize,
    pub targets: Vec<f64>,
    pub deltas: Vec<f64>,
    pub caps: Vec<f64>,
    pub acc_prev: f64,
    pub sensitivity: Vec<f64>,
    pub rng: ChaCha8Rng,
    pub optimizer: Optimizer,
    pub ranked_capacity: usize,
    pub ranked: Vec<RankedMeta>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultSummary {
    pub scores: Scores,
    pub weighted_sparsity: f64,
    pub layer_sparsity: Vec<f64>,
    /// Whether every layer reached its sparsity threshold.
    pub meets_caps: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    /// Effective configuration with `out` blanked.
    pub config: PipelineConfig,
    /// Dense model after pre-training.
    pub baseline: Scores,
    pub search: SearchSnapshot,
    pub finished: bool,
    pub result: Option<ResultSummary>,
    pub history: Vec<HistoryRow>,
    /// SHA-256 per blob, keyed by relative path.
    pub files: BTreeMap<String, String>,
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path)
            .map_err(|e| Error::Config(format!("no checkpoint at {}: {e}", dir.display())))?;
        let m: Manifest = serde_json::from_str(&text)?;
        if m.format != FORMAT_VERSION {
            return Err(Error::Format(format!("checkpoint format {} (expected {FORMAT_VERSION})", m.format)));
        }
        Ok(m)
    }
}

/// The configuration as recorded in a manifest.
pub fn recorded_config(config: &PipelineConfig) -> PipelineConfig {
    PipelineConfig { out: PathBuf::new(), ..config.clone() }
}

fn magic<W: Write>(w: &mut W, m: &[u8; 4]) -> Result<()> {
    Ok(w.write_all(m)?)
}

fn expect_magic<R: Read>(r: &mut R, m: &[u8; 4]) -> Result<()> {
    let mut got = [0u8; 4];
    r.read_exact(&mut got)?;
    if &got != m {
        return Err(Error::Format(format!("expected blob tag {:?}, found {:?}", m, got)));
    }
    Ok(())
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("length {n} exceeds u32")))
}

pub fn write_params<W: Write>(w: &mut W, model: &Model<f32>) -> Result<()> {
    magic(w, b"UPRM")?;
    let idx = model.prunable();
    write_u32(w, len_u32(idx.len())?)?;
    for i in idx {
        let l = &model.layers[i];
        let weight = l.weight().expect("prunable");
        write_tensor(w, weight)?;
        let bias = l.bias().expect("prunable");
        write_u32(w, len_u32(bias.len())?)?;
        write_values(w, bias, weight.precision())?;
    }
    Ok(())
}

/// Overwrites `model`'s parameters; shapes must match.
pub fn read_params<R: Read>(r: &mut R, model: &mut Model<f32>) -> Result<()> {
    expect_magic(r, b"UPRM")?;
    let idx = model.prunable();
    let n = read_u32(r)? as usize;
    if n != idx.len() {
        return Err(Error::Format(format!("{n} parameter layers, model has {}", idx.len())));
    }
    for i in idx {
        let t = read_tensor::<_, f32>(r)?;
        let layer = &mut model.layers[i];
        let expected = layer.weight().expect("prunable").shape();
        if t.shape() != expected {
            return Err(Error::Format(format!("layer {i}: weight {} in blob, model expects {expected}", t.shape())));
        }
        let precision = t.precision();
        *layer.weight_mut().expect("prunable") = t;
        let bn = read_u32(r)? as usize;
        let bias = layer.bias_mut().expect("prunable");
        if bn != bias.len() {
            return Err(Error::Format(format!("layer {i}: {bn} biases, model expects {}", bias.len())));
        }
        *bias = read_values(r, bn, precision)?;
    }
    Ok(())
}

pub fn write_masks<W: Write>(w: &mut W, masks: &[Mask]) -> Result<()> {
    magic(w, b"UMSK")?;
    write_u32(w, len_u32(masks.len())?)?;
    for m in masks {
        write_u32(w, len_u32(m.len())?)?;
        w.write_all(&m.pack())?;
    }
    Ok(())
}

/// Reads masks shaped like `model`'s prunable weights.
pub fn read_masks<R: Read>(r: &mut R, model: &Model<f32>) -> Result<Vec<Mask>> {
    expect_magic(r, b"UMSK")?;
    let idx = model.prunable();
    let n = read_u32(r)? as usize;
    if n != idx.len() {
        return Err(Error::Format(format!("{n} masks, model has {} prunable layers", idx.len())));
    }
    idx.iter()
        .map(|&i| {
            let shape = model.layers[i].weight().expect("prunable").shape();
            let bits = read_u32(r)? as usize;
            if bits != shape.len() {
                return Err(Error::Format(format!("layer {i}: {bits} mask bits for shape {shape}")));
            }
            let mut packed = vec![0u8; bits.div_ceil(8)];
            r.read_exact(&mut packed)?;
            Mask::unpack(shape, &packed)
        })
        .collect()
}

pub fn write_state_blob<W: Write>(w: &mut W, pm: &PrunedModel<f32>) -> Result<()> {
    write_params(w, &pm.model)?;
    write_masks(w, &pm.masks)?;
    magic(w, b"UGRD")?;
    write_u32(w, len_u32(pm.grad_stats.len())?)?;
    for g in &pm.grad_stats {
        write_u32(w, len_u32(g.len())?)?;
        write_values(w, g, PrecisionMode::Binary32)?;
    }
    w.write_all(&pm.accuracy.to_le_bytes())?;
    Ok(())
}

pub fn read_state_blob<R: Read>(r: &mut R, template: &Model<f32>, optimizer: &Optimizer) -> Result<PrunedModel<f32>> {
    let mut model = template.clone();
    read_params(r, &mut model)?;
    let masks = read_masks(r, &model)?;
    expect_magic(r, b"UGRD")?;
    let n = read_u32(r)? as usize;
    if n != masks.len() {
        return Err(Error::Format(format!("{n} gradient tensors for {} masks", masks.len())));
    }
    let grad_stats = masks
        .iter()
        .map(|m| {
            let len = read_u32(r)? as usize;
            if len != m.len() {
                return Err(Error::Format(format!("{len} gradient values for {} weights", m.len())));
            }
            read_values(r, len, PrecisionMode::Binary32)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut acc = [0u8; 8];
    r.read_exact(&mut acc)?;
    Ok(PrunedModel { model, masks, optimizer: optimizer.clone(), grad_stats, accuracy: f64::from_le_bytes(acc) })
}

fn history_csv(rows: &[HistoryRow]) -> Result<Vec<u8>> {
    let join = |v: &mut dyn Iterator<Item = String>| v.collect::<Vec<_>>().join(";");
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::Format(e.to_string());
    w.write_record([
        "iteration",
        "layers",
        "loss",
        "accuracy",
        "sensitivity",
        "operator",
        "weighted_sparsity",
        "layer_sparsity",
    ])
    .map_err(io)?;
    for h in rows {
        let op = serde_json::to_value(h.operator)?;
        w.write_record([
            h.iteration.to_string(),
            join(&mut h.layers.iter().map(|l| l.to_string())),
            h.loss.to_string(),
            h.accuracy.to_string(),
            h.sensitivity.to_string(),
            op.as_str().unwrap_or_default().to_string(),
            h.weighted_sparsity.to_string(),
            join(&mut h.layer_sparsity.iter().map(|s| s.to_string())),
        ])
        .map_err(io)?;
    }
    w.into_inner().map_err(|e| Error::Format(e.to_string()))
}

fn digest(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

/// Writes the whole checkpoint into `dir`, replacing an earlier one.
/// `result` is the selected model once the search has finished.
pub fn save_checkpoint(
    dir: &Path,
    config: &PipelineConfig,
    baseline: Scores,
    state: &PruneState<f32>,
    result: Option<(&PrunedModel<f32>, &ResultSummary)>,
) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let state_dir = dir.join(STATE_DIR);
    if state_dir.exists() {
        fs::remove_dir_all(&state_dir)?;
    }
    fs::create_dir_all(&state_dir)?;
    let mut files = BTreeMap::new();
    let mut put = |name: String, bytes: Vec<u8>| -> Result<()> {
        fs::write(dir.join(&name), &bytes)?;
        files.insert(name, digest(&bytes));
        Ok(())
    };

    let selected = result.map_or(&state.current, |(pm, _)| pm);
    let mut blob = Vec::new();
    write_params(&mut blob, &selected.model)?;
    put(MODEL_BLOB.into(), blob)?;
    let mut blob = Vec::new();
    write_masks(&mut blob, &selected.masks)?;
    put(MASK_BLOB.into(), blob)?;

    let mut blob = Vec::new();
    write_state_blob(&mut blob, &state.current)?;
    put(format!("{STATE_DIR}/current.bin"), blob)?;
    let mut ranked = Vec::new();
    for (i, e) in state.ranked.entries.iter().enumerate() {
        let name = format!("{STATE_DIR}/ranked-{i:03}.bin");
        let mut blob = Vec::new();
        write_state_blob(&mut blob, e)?;
        put(name.clone(), blob)?;
        ranked.push(RankedMeta { file: name, accuracy: e.accuracy, weighted_sparsity: e.weighted_sparsity() });
    }
    let history = history_csv(&state.history)?;
    put(HISTORY_CSV.into(), history)?;

    let manifest = Manifest {
        format: FORMAT_VERSION,
        config: recorded_config(config),
        baseline,
        search: SearchSnapshot {
            iteration: state.iteration,
            targets: state.targets.clone(),
            deltas: state.deltas.clone(),
            caps: state.caps.clone(),
            acc_prev: state.acc_prev,
            sensitivity: state.sensitivity.clone(),
            rng: state.rng.clone(),
            optimizer: state.current.optimizer.clone(),
            ranked_capacity: state.ranked.capacity,
            ranked,
        },
        finished: result.is_some(),
        result: result.map(|(_, s)| s.clone()),
        history: state.history.clone(),
        files,
    };
    let tmp = dir.join(format!("{MANIFEST}.tmp"));
    fs::write(&tmp, serde_json::to_string_pretty(&manifest)?)?;
    fs::rename(&tmp, dir.join(MANIFEST))?;
    Ok(manifest)
}

fn read_checked(dir: &Path, manifest: &Manifest, name: &str) -> Result<Vec<u8>> {
    let bytes = fs::read(dir.join(name))?;
    let expected = manifest
        .files
        .get(name)
        .ok_or_else(|| Error::Format(format!("manifest does not list {name}")))?;
    if &digest(&bytes) != expected {
        return Err(Error::Corrupt(format!("{name} does not match its recorded checksum")));
    }
    Ok(bytes)
}

fn template(manifest: &Manifest) -> Result<Model<f32>> {
    Model::build(manifest.config.model_spec()?, 0)
}

/// The selected (or current) model with its masks applied.
pub fn load_selected(dir: &Path) -> Result<(Manifest, Model<f32>, Vec<Mask>)> {
    let manifest = Manifest::read(dir)?;
    let mut model = template(&manifest)?;
    read_params(&mut read_checked(dir, &manifest, MODEL_BLOB)?.as_slice(), &mut model)?;
    let masks = read_masks(&mut read_checked(dir, &manifest, MASK_BLOB)?.as_slice(), &model)?;
    model.apply_masks(&masks)?;
    Ok((manifest, model, masks))
}

/// Rebuilds the search state so a resumed run continues exactly.
pub fn load_state(dir: &Path) -> Result<(Manifest, PruneState<f32>)> {
    let manifest = Manifest::read(dir)?;
    let base = template(&manifest)?;
    let s = &manifest.search;
    let blob = |name: &str| -> Result<PrunedModel<f32>> {
        read_state_blob(&mut read_checked(dir, &manifest, name)?.as_slice(), &base, &s.optimizer)
    };
    let current = blob(&format!("{STATE_DIR}/current.bin"))?;
    let mut ranked = RankedList::new(s.ranked_capacity);
    for meta in &s.ranked {
        ranked.entries.push(blob(&meta.file)?);
    }
    let state = PruneState {
        iteration: s.iteration,
        current,
        targets: s.targets.clone(),
        deltas: s.deltas.clone(),
        caps: s.caps.clone(),
        acc_prev: s.acc_prev,
        ranked,
        sensitivity: s.sensitivity.clone(),
        history: manifest.history.clone(),
        rng: s.rng.clone(),
    };
    Ok((manifest, state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::{Init, LayerSpec, ModelSpec};

    fn model() -> Model<f32> {
        let spec = ModelSpec {
            init: Init::Glorot,
            input: [2, 5, 5],
            layers: vec![
                LayerSpec::Conv2d { out_channels: 3, kernel: [3, 3], stride: [1, 1], padding: [1, 1] },
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::Dense { units: 2 },
                LayerSpec::SoftmaxXent,
            ],
        };
        Model::build(&spec, 5).unwrap()
    }

    fn pruned() -> PrunedModel<f32> {
        let mut pm = PrunedModel::new(model(), Optimizer::sgd(0.05));
        for (k, m) in pm.masks.iter_mut().enumerate() {
            let bits = (0..m.len()).map(|i| ((i * 7 + k) % 3 != 0) as u8).collect();
            *m = Mask::from_bits(m.shape(), bits).unwrap();
        }
        pm.apply_masks().unwrap();
        pm.grad_stats = pm.masks.iter().map(|m| (0..m.len()).map(|i| i as f32 * 0.01 - 0.3).collect()).collect();
        pm.accuracy = 0.625;
        pm
    }

    #[test]
    fn state_blob_roundtrip() {
        let pm = pruned();
        let mut buf = Vec::new();
        write_state_blob(&mut buf, &pm).unwrap();
        let back = read_state_blob(&mut buf.as_slice(), &model(), &pm.optimizer).unwrap();
        assert_eq!(back, pm);
    }

    #[test]
    fn mask_blob_is_bit_packed() {
        let pm = pruned();
        let mut buf = Vec::new();
        write_masks(&mut buf, &pm.masks).unwrap();
        let bits: usize = pm.masks.iter().map(|m| m.len()).sum();
        let bytes: usize = pm.masks.iter().map(|m| m.len().div_ceil(8)).sum();
        assert!(bits > 8 * 20);
        assert_eq!(buf.len(), 4 + 4 + 4 * pm.masks.len() + bytes);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut buf = Vec::new();
        write_params(&mut buf, &model()).unwrap();
        let spec = ModelSpec {
            init: Init::Glorot,
            input: [2, 5, 5],
            layers: vec![LayerSpec::Flatten, LayerSpec::Dense { units: 2 }, LayerSpec::Dense { units: 2 }, LayerSpec::SoftmaxXent],
        };
        let mut other = Model::<f32>::build(&spec, 0).unwrap();
        assert!(read_params(&mut buf.as_slice(), &mut other).is_err());
        assert!(expect_magic(&mut &b"XXXX"[..], b"UPRM").is_err());
    }

    #[test]
    fn history_csv_columns() {
        let rows = vec![HistoryRow {
            iteration: 3,
            layers: vec![0, 2],
            loss: 0.5,
            accuracy: 0.75,
            sensitivity: -0.01,
            operator: crate::pruning::Operator::Crossover,
            weighted_sparsity: 0.4,
            layer_sparsity: vec![0.1, 0.5],
        }];
        let text = String::from_utf8(history_csv(&rows).unwrap()).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "iteration,layers,loss,accuracy,sensitivity,operator,weighted_sparsity,layer_sparsity"
        );
        assert_eq!(lines.next().unwrap(), "3,0;2,0.5,0.75,-0.01,crossover,0.4,0.1;0.5");
    }
}
