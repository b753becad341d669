//! Sparse-vs-dense layer timing.
//!
//! Every row times [`sparse_conv_forward`] with an autotuned sub-batch
//! against [`dense_conv_fast`] on the same input, with the two contenders'
//! runs interleaved.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::sparse::{autotune_sb, build_csr, sparse_conv_forward, worker_pool, SB_CANDIDATES};
use crate::tensor::{dense_conv_fast, ConvGeometry, DenseTensor4, PrecisionMode};
use crate::timing::{median_times_interleaved, millis, TimingPlan};
use crate::trainer::{Layer, Model};

/// Name of the dense engine rows are compared against.
pub const DENSE_COMPARATOR: &str = "dense_conv_fast";

fn default_stride() -> [usize; 2] {
    [1, 1]
}

/// One convolution layer to time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchLayer {
    pub id: String,
    pub in_channels: usize,
    pub out_channels: usize,
    /// (height, width)
    pub kernel: [usize; 2],
    /// Input (height, width); one-dimensional layers use width 1.
    pub input: [usize; 2],
    #[serde(default = "default_stride")]
    pub stride: [usize; 2],
    #[serde(default)]
    pub padding: [usize; 2],
    /// Overrides the report-wide batch.
    #[serde(default)]
    pub batch: Option<usize>,
    /// Overrides the report-wide sweep, in percent.
    #[serde(default)]
    pub sparsities: Option<Vec<f64>>,
}

impl BenchLayer {
    pub fn geometry(&self) -> Result<ConvGeometry> {
        ConvGeometry::new(
            self.in_channels,
            self.out_channels,
            (self.kernel[0], self.kernel[1]),
            (self.input[0], self.input[1]),
            (self.stride[0], self.stride[1]),
            (self.padding[0], self.padding[1]),
        )
    }
}

fn default_sweep() -> Vec<f64> {
    vec![77.0, 83.0, 87.5]
}

fn default_precisions() -> Vec<PrecisionMode> {
    vec![PrecisionMode::Binary32]
}

fn default_batch() -> usize {
    8
}

fn default_candidates() -> Vec<usize> {
    SB_CANDIDATES.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    /// Named layer groups, see [`preset`].
    #[serde(default)]
    pub presets: Vec<String>,
    #[serde(default)]
    pub layers: Vec<BenchLayer>,
    /// Sparsity sweep in percent.
    #[serde(default = "default_sweep")]
    pub sparsities: Vec<f64>,
    #[serde(default = "default_precisions")]
    pub precisions: Vec<PrecisionMode>,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default)]
    pub timing: TimingPlan,
    /// Sub-batch sizes offered to the autotuner.
    #[serde(default = "default_candidates")]
    pub candidates: Vec<usize>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults parse")
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.precisions.is_empty() || self.timing.runs == 0 {
            return Err(Error::Config("bench needs a batch, a precision and at least one timed run".into()));
        }
        let sweeps = std::iter::once(&self.sparsities).chain(self.layers.iter().filter_map(|l| l.sparsities.as_ref()));
        for s in sweeps.flatten() {
            if !(0.0..=100.0).contains(s) {
                return Err(Error::Config(format!("sparsity {s}% outside [0, 100]")));
            }
        }
        for p in &self.presets {
            preset(p)?;
        }
        Ok(())
    }

    /// Preset layers followed by the explicit ones; ids must be unique.
    pub fn resolve_layers(&self) -> Result<Vec<BenchLayer>> {
        let mut layers = Vec::new();
        for p in &self.presets {
            layers.extend(preset(p)?);
        }
        layers.extend(self.layers.iter().cloned());
        let mut ids: Vec<&str> = layers.iter().map(|l| l.id.as_str()).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Config(format!("duplicate bench layer id {:?}", w[0])));
        }
        Ok(layers)
    }
}

pub const PRESET_CONV1D: &str = "conv1d-300x64";
pub const PRESET_VGG16: &str = "vgg16-512x14";

/// Layer shapes of the reference GPU measurements: the 300×64
/// one-dimensional layer with 2×1 and 3×1 kernels (swept), and the
/// 512×14×14×512 VGG16 layer at 92% sparsity.
pub fn preset(name: &str) -> Result<Vec<BenchLayer>> {
    let conv1d = |id: &str, k: usize, pad: usize| BenchLayer {
        id: id.into(),
        in_channels: 64,
        out_channels: 64,
        kernel: [k, 1],
        input: [300, 1],
        stride: [1, 1],
        padding: [pad, 0],
        batch: None,
        sparsities: None,
    };
    match name {
        PRESET_CONV1D => Ok(vec![conv1d("conv1d-300x64-k2x1", 2, 0), conv1d("conv1d-300x64-k3x1", 3, 1)]),
        PRESET_VGG16 => Ok(vec![BenchLayer {
            id: "vgg16-512x14x14x512".into(),
            in_channels: 512,
            out_channels: 512,
            kernel: [3, 3],
            input: [14, 14],
            stride: [1, 1],
            padding: [1, 1],
            batch: Some(2),
            sparsities: Some(vec![92.0]),
        }]),
        other => Err(invalid!("unknown bench preset {other:?}")),
    }
}

/// One timed (layer, sparsity, precision) case. Column order is the CSV
/// header: `layer_id,geometry,sparsity_pct,precision,sparse_ms,dense_ms,sb_s,speedup`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub layer_id: String,
    pub geometry: String,
    pub sparsity_pct: f64,
    pub precision: PrecisionMode,
    pub sparse_ms: f64,
    pub dense_ms: f64,
    pub sb_s: usize,
    /// dense_ms / sparse_ms
    pub speedup: f64,
}

pub const CSV_HEADER: &str = "layer_id,geometry,sparsity_pct,precision,sparse_ms,dense_ms,sb_s,speedup";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchEnv {
    pub cpu: String,
    pub logical_cpus: usize,
    pub workers: usize,
    pub warmup: usize,
    pub runs: usize,
    pub batch: usize,
    pub dense_comparator: String,
}

impl BenchEnv {
    pub fn capture(workers: usize, timing: TimingPlan, batch: usize) -> Self {
        let cpu = std::fs::read_to_string("/proc/cpuinfo")
            .ok()
            .and_then(|s| {
                s.lines()
                    .find(|l| l.starts_with("model name"))
                    .and_then(|l| l.split(':').nth(1))
                    .map(|v| v.trim().to_string())
            })
            .unwrap_or_else(|| std::env::consts::ARCH.to_string());
        BenchEnv {
            cpu,
            logical_cpus: std::thread::available_parallelism().map_or(1, |n| n.get()),
            workers,
            warmup: timing.warmup,
            runs: timing.runs,
            batch,
            dense_comparator: DENSE_COMPARATOR.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub env: BenchEnv,
    pub rows: Vec<BenchRow>,
}

/// Dense weights where every output channel keeps exactly
/// `round((1 - s)·taps)` non-zeros at random positions. Kept values have
/// magnitude in [0.05, 1).
pub fn synthesize_weights(g: &ConvGeometry, sparsity_pct: f64, rng: &mut ChaCha8Rng) -> DenseTensor4<f32> {
    let taps = g.taps();
    let keep = ((1.0 - sparsity_pct / 100.0) * taps as f64).round() as usize;
    let mut w = DenseTensor4::zeros(g.weight_shape());
    for d in 0..g.out_channels {
        let row = &mut w.data_mut()[d * taps..(d + 1) * taps];
        for i in sample(rng, taps, keep.min(taps)) {
            let v: f32 = rng.gen_range(0.05..1.0);
            row[i] = if rng.gen_bool(0.5) { v } else { -v };
        }
    }
    w
}

/// Times one case. `weights` are rounded to `precision` first.
pub fn bench_case(
    layer_id: &str,
    g: &ConvGeometry,
    weights: &DenseTensor4<f32>,
    batch: usize,
    precision: PrecisionMode,
    config: &BenchConfig,
    workers: usize,
    rng: &mut ChaCha8Rng,
) -> Result<BenchRow> {
    let w = weights.clone().with_precision(precision);
    let x = DenseTensor4::from_fn(g.input_shape(batch), |_, _, _, _| rng.gen_range(-1.0f32..1.0)).with_precision(precision);
    let filter = build_csr(&w, g)?;
    let tuned = autotune_sb(&x, &filter, &config.candidates, workers, config.timing)?;
    let exec = tuned.config;
    let pool = worker_pool(workers);
    dense_conv_fast(&x, &w, g)?;
    let times = median_times_interleaved(
        config.timing,
        &mut [
            &mut || {
                std::hint::black_box(sparse_conv_forward(&x, &filter, &exec).ok());
            },
            &mut || {
                pool.install(|| std::hint::black_box(dense_conv_fast(&x, &w, g).ok()));
            },
        ],
    );
    let (sparse_ms, dense_ms) = (millis(times[0]), millis(times[1]));
    let zeros = w.data().iter().filter(|v| **v == 0.0).count();
    Ok(BenchRow {
        layer_id: layer_id.into(),
        geometry: g.label(),
        sparsity_pct: 100.0 * zeros as f64 / w.data().len() as f64,
        precision,
        sparse_ms,
        dense_ms,
        sb_s: exec.sub_batch,
        speedup: dense_ms / sparse_ms,
    })
}

/// Sweeps every configured layer over its sparsities and precisions with
/// synthesized weights.
pub fn run_bench(config: &BenchConfig, workers: usize, seed: u64) -> Result<BenchReport> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    for layer in config.resolve_layers()? {
        let g = layer.geometry()?;
        let batch = layer.batch.unwrap_or(config.batch);
        for &s in layer.sparsities.as_ref().unwrap_or(&config.sparsities) {
            let w = synthesize_weights(&g, s, &mut rng);
            for &p in &config.precisions {
                let row = bench_case(&layer.id, &g, &w, batch, p, config, workers, &mut rng)?;
                log::info!(
                    "{} {:.1}% {}: sparse {:.3} ms (sb {}), dense {:.3} ms",
                    row.layer_id,
                    row.sparsity_pct,
                    p.name(),
                    row.sparse_ms,
                    row.sb_s,
                    row.dense_ms
                );
                rows.push(row);
            }
        }
    }
    Ok(BenchReport { env: BenchEnv::capture(workers, config.timing, config.batch), rows })
}

/// Times the convolution layers of a trained model with their actual
/// (masked) weights. Layer ids are `layer<index>`.
pub fn bench_model(model: &Model<f32>, config: &BenchConfig, workers: usize, seed: u64) -> Result<BenchReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    for (li, layer) in model.layers.iter().enumerate() {
        if let Layer::Conv { geometry, weight, .. } = layer {
            for &p in &config.precisions {
                rows.push(bench_case(&format!("layer{li}"), geometry, weight, config.batch, p, config, workers, &mut rng)?);
            }
        }
    }
    if rows.is_empty() {
        return Err(invalid!("model has no convolution layers to bench"));
    }
    Ok(BenchReport { env: BenchEnv::capture(workers, config.timing, config.batch), rows })
}

pub fn write_csv(path: &Path, rows: &[BenchRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Parses a bench CSV, checking the header against [`CSV_HEADER`].
pub fn read_csv(path: &Path) -> Result<Vec<BenchRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let header: Vec<String> = r.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    if header.join(",") != CSV_HEADER {
        return Err(Error::Format(format!("unexpected bench header {:?}", header.join(","))));
    }
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Format(format!("{other:?}")),
    }
}

pub fn markdown(report: &BenchReport) -> String {
    let e = &report.env;
    let mut s = String::new();
    let _ = writeln!(s, "# Sparse vs dense convolution\n");
    let _ = writeln!(
        s,
        "CPU: {} ({} logical), workers: {}, warmup {} + {} timed runs (median), dense engine: {}\n",
        e.cpu, e.logical_cpus, e.workers, e.warmup, e.runs, e.dense_comparator
    );
    let _ = writeln!(s, "| layer | geometry | sparsity % | precision | sparse ms | dense ms | sb_S | speedup |");
    let _ = writeln!(s, "|---|---|---:|---|---:|---:|---:|---:|");
    for r in &report.rows {
        let _ = writeln!(
            s,
            "| {} | {} | {:.1} | {} | {:.3} | {:.3} | {} | {:.2} |",
            r.layer_id,
            r.geometry,
            r.sparsity_pct,
            r.precision.name(),
            r.sparse_ms,
            r.dense_ms,
            r.sb_s,
            r.speedup
        );
    }
    s
}

/// Writes `bench.csv`, `bench.md` and `bench_env.json` into `dir`.
pub fn write_report(dir: &Path, report: &BenchReport) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_csv(&dir.join("bench.csv"), &report.rows)?;
    std::fs::write(dir.join("bench.md"), markdown(report))?;
    std::fs::write(dir.join("bench_env.json"), serde_json::to_string_pretty(&report.env)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> BenchConfig {
        BenchConfig { timing: TimingPlan { warmup: 0, runs: 1 }, batch: 2, ..Default::default() }
    }

    #[test]
    fn synthesized_channels_have_exact_nnz() {
        let g = ConvGeometry::new(64, 8, (2, 1), (300, 1), (1, 1), (0, 0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (s, keep) in [(77.0, 29), (83.0, 22), (87.5, 16), (0.0, 128), (100.0, 0)] {
            let w = synthesize_weights(&g, s, &mut rng);
            for d in 0..8 {
                let row = &w.data()[d * 128..(d + 1) * 128];
                assert_eq!(row.iter().filter(|v| **v != 0.0).count(), keep, "{s}%");
            }
        }
    }

    #[test]
    fn presets_resolve_and_validate() {
        let c = BenchConfig { presets: vec![PRESET_CONV1D.into(), PRESET_VGG16.into()], ..Default::default() };
        let layers = c.resolve_layers().unwrap();
        assert_eq!(layers.len(), 3);
        for l in &layers {
            l.geometry().unwrap();
        }
        assert_eq!(layers[2].sparsities, Some(vec![92.0]));
        assert!(BenchConfig { presets: vec!["nope".into()], ..Default::default() }.validate().is_err());
    }

    #[test]
    fn duplicate_ids_rejected() {
        let mut c = BenchConfig { presets: vec![PRESET_CONV1D.into()], ..Default::default() };
        c.layers = preset(PRESET_CONV1D).unwrap();
        assert!(c.resolve_layers().is_err());
    }

    #[test]
    fn rows_report_measured_sparsity_and_ratio() {
        let mut c = quick();
        c.layers = vec![BenchLayer {
            id: "l".into(),
            in_channels: 4,
            out_channels: 4,
            kernel: [3, 3],
            input: [6, 6],
            stride: [1, 1],
            padding: [1, 1],
            batch: None,
            sparsities: Some(vec![50.0]),
        }];
        c.precisions = vec![PrecisionMode::Binary32, PrecisionMode::Binary16];
        let r = run_bench(&c, 1, 3).unwrap();
        assert_eq!(r.rows.len(), 2);
        for row in &r.rows {
            assert!((row.sparsity_pct - 50.0).abs() < 1e-9);
            assert!((row.speedup - row.dense_ms / row.sparse_ms).abs() < 1e-12);
            assert_eq!(row.sb_s, 2);
        }
        assert_eq!(r.env.runs, 1);
    }

    #[test]
    fn csv_roundtrip_and_header() {
        let rows = vec![BenchRow {
            layer_id: "a,b".into(),
            geometry: "1x2x2-k1x1-s1x1-p0x0-1".into(),
            sparsity_pct: 87.5,
            precision: PrecisionMode::Binary16,
            sparse_ms: 0.125,
            dense_ms: 0.5,
            sb_s: 4,
            speedup: 4.0,
        }];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.csv");
        write_csv(&p, &rows).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().next().unwrap(), CSV_HEADER);
        assert_eq!(read_csv(&p).unwrap(), rows);
        std::fs::write(&p, "layer,ms\nx,1\n").unwrap();
        assert!(matches!(read_csv(&p), Err(Error::Format(_))));
    }
}
