//! Whole-model quantisation modes.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::PrecisionMode;
use crate::trainer::{evaluate, Dataset, InferenceOptions, Model, SplitKind};

use super::kmeans::{kmeans_codebook, Codebook, KMeansInit};

/// Saturation threshold for activations in codebook mode.
pub const ACTIVATION_SATURATION: f64 = 0.99;
/// Clusters per layer in codebook mode.
pub const CODEBOOK_OMEGA: usize = 16;
/// Centroid width in codebook mode.
pub const CODEBOOK_PSI: u32 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum QuantMode {
    /// Untouched binary32 model.
    #[serde(rename = "passthrough")]
    Passthrough,
    /// Weights and activations in emulated binary16.
    #[serde(rename = "16b/16b")]
    Half,
    /// 16-entry codebook weights, binary16 activations with saturation.
    #[serde(rename = "4b/16b")]
    Codebook,
}

impl QuantMode {
    pub fn name(self) -> &'static str {
        match self {
            QuantMode::Passthrough => "passthrough",
            QuantMode::Half => "16b/16b",
            QuantMode::Codebook => "4b/16b",
        }
    }
}

impl fmt::Display for QuantMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for QuantMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "passthrough" | "none" | "32b/32b" => Ok(QuantMode::Passthrough),
            "16b/16b" | "half" => Ok(QuantMode::Half),
            "4b/16b" | "codebook" => Ok(QuantMode::Codebook),
            other => Err(invalid!("unknown quantisation mode {other:?}")),
        }
    }
}

/// A model ready for evaluation in its quantised numeric mode.
#[derive(Debug, Clone)]
pub struct QuantizedModel<T> {
    pub mode: QuantMode,
    pub model: Model<T>,
    pub options: InferenceOptions<T>,
    /// Codebook per prunable layer (codebook mode only).
    pub codebooks: Vec<Codebook>,
}

/// Largest output of every layer over `data`'s validation split.
pub fn calibrate_activations<T: Scalar>(model: &Model<T>, data: &Dataset<T>) -> Result<Vec<T>> {
    let mut maxima = vec![T::neg_infinity(); model.layers.len()];
    let x = &data.validation.x;
    for start in (0..x.shape().n).step_by(64) {
        let chunk = x.slice_batch(start..(start + 64).min(x.shape().n));
        let mut taps = Vec::with_capacity(model.layers.len());
        model.forward_with(&chunk, &InferenceOptions::binary32(), Some(&mut taps))?;
        for (m, t) in maxima.iter_mut().zip(&taps) {
            *m = t.data().iter().copied().fold(*m, T::max);
        }
    }
    Ok(maxima)
}

/// Builds the quantised form of `model`. Codebook mode saturates the
/// outputs of convolution and dense layers, except the network output, at
/// 0.99 of their calibrated maxima.
pub fn quantize_model<T: Scalar>(model: &Model<T>, mode: QuantMode, data: &Dataset<T>) -> Result<QuantizedModel<T>> {
    match mode {
        QuantMode::Passthrough => Ok(QuantizedModel {
            mode,
            model: model.clone(),
            options: InferenceOptions::binary32(),
            codebooks: Vec::new(),
        }),
        QuantMode::Half => Ok(QuantizedModel {
            mode,
            model: model.clone().with_precision(PrecisionMode::Binary16),
            options: InferenceOptions { precision: PrecisionMode::Binary16, saturation: Vec::new() },
            codebooks: Vec::new(),
        }),
        QuantMode::Codebook => {
            let maxima = calibrate_activations(model, data)?;
            let last = model.layers.len() - 1;
            let saturation = maxima
                .iter()
                .enumerate()
                .map(|(i, &m)| {
                    (i != last && model.layers[i].weight().is_some()).then(|| T::lit(ACTIVATION_SATURATION) * m)
                })
                .collect();
            let mut q = model.clone();
            let mut codebooks = Vec::new();
            for li in model.prunable() {
                let w = q.layers[li].weight_mut().expect("prunable");
                let cb = kmeans_codebook(w.data(), CODEBOOK_OMEGA, CODEBOOK_PSI, KMeansInit::default())?;
                for (v, r) in w.data_mut().iter_mut().zip(cb.reconstruct()) {
                    *v = T::lit(r);
                }
                let b = q.layers[li].bias_mut().expect("prunable");
                b.iter_mut().for_each(|v| *v = PrecisionMode::Binary16.store(*v));
                codebooks.push(cb);
            }
            Ok(QuantizedModel {
                mode,
                model: q,
                options: InferenceOptions { precision: PrecisionMode::Binary16, saturation },
                codebooks,
            })
        }
    }
}

/// Score of the binary32 model and of its quantised form on one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantReport {
    pub mode: QuantMode,
    pub split: SplitKind,
    pub baseline: f64,
    pub quantized: f64,
    /// (quantized − baseline)·100, percentage points.
    pub delta_points: f64,
    pub weighted_sparsity_before: f64,
    pub weighted_sparsity_after: f64,
}

/// Quantises `model` and scores both forms on `split`.
pub fn quantize_and_report<T: Scalar>(
    model: &Model<T>,
    mode: QuantMode,
    data: &Dataset<T>,
    split: SplitKind,
) -> Result<(QuantizedModel<T>, QuantReport)> {
    let q = quantize_model(model, mode, data)?;
    let baseline = evaluate(model, data, split, &InferenceOptions::binary32())?.score();
    let quantized = evaluate(&q.model, data, split, &q.options)?.score();
    let zeros = |m: &Model<T>| -> f64 {
        let (mut z, mut n) = (0usize, 0usize);
        for li in m.prunable() {
            let w = m.layers[li].weight().expect("prunable").data();
            z += w.iter().filter(|v| v.is_zero()).count();
            n += w.len();
        }
        z as f64 / n.max(1) as f64
    };
    let report = QuantReport {
        mode,
        split,
        baseline,
        quantized,
        delta_points: (quantized - baseline) * 100.0,
        weighted_sparsity_before: zeros(model),
        weighted_sparsity_after: zeros(&q.model),
    };
    Ok((q, report))
}
