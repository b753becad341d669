use std::fs;
use std::path::Path;

use unsparse_core::pipeline::bench::{read_csv, write_report, CSV_HEADER};
use unsparse_core::pipeline::checkpoint::MANIFEST;
use unsparse_core::pipeline::quantize::mode_slug;
use unsparse_core::pipeline::{
    configure, load_selected, run_bench, run_prune, run_quantize, Backend, BenchConfig, PipelineConfig,
};
use unsparse_core::quant::QuantMode;
use unsparse_core::trainer::SplitKind;
use unsparse_core::Error;

fn tiny(out: &Path, iterations: usize) -> PipelineConfig {
    let mut c = PipelineConfig::from_json(
        r#"{
        "name": "tiny",
        "seed": 11,
        "dataset": {"kind": "synthetic-images", "classes": 3, "size": 8, "train": 150, "test": 60,
                    "noise": 0.4, "jitter": 1.0},
        "model": {"input": [1, 8, 8], "layers": [
            {"kind": "conv2d", "out_channels": 4, "kernel": [3, 3], "padding": [1, 1]},
            {"kind": "relu"},
            {"kind": "max_pool", "size": 2},
            {"kind": "flatten"},
            {"kind": "dense", "units": 3},
            {"kind": "softmax_xent"}
        ]},
        "training": {"epochs": 2, "batch_size": 16, "lr": 0.05},
        "prune": {"layers_per_iteration": 1, "caps": 0.9, "checkpoint_every": 2}
    }"#,
    )
    .unwrap();
    c.out = out.to_path_buf();
    c.prune.hyper.iterations = iterations;
    c
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    fs::read(dir.join(name)).unwrap()
}

#[test]
fn resume_matches_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run_prune(&tiny(&a, 3), false).unwrap();
    let resumed = run_prune(&tiny(&a, 6), true).unwrap();
    let straight = run_prune(&tiny(&b, 6), false).unwrap();
    assert_eq!(resumed.history.len(), 6);
    for f in [MANIFEST, "model.bin", "masks.bin", "history.csv", "state/current.bin"] {
        assert_eq!(read(&a, f), read(&b, f), "{f} differs");
    }
    assert_eq!(serde_json::to_string(&resumed).unwrap(), serde_json::to_string(&straight).unwrap());
}

#[test]
fn resume_rejects_a_changed_config() {
    let tmp = tempfile::tempdir().unwrap();
    run_prune(&tiny(tmp.path(), 2), false).unwrap();
    let mut other = tiny(tmp.path(), 4);
    other.training.lr = 0.1;
    assert!(matches!(run_prune(&other, true), Err(Error::Config(_))));
}

#[test]
fn tampered_checkpoint_is_detected() {
    let tmp = tempfile::tempdir().unwrap();
    run_prune(&tiny(tmp.path(), 2), false).unwrap();
    let path = tmp.path().join("model.bin");
    let mut bytes = fs::read(&path).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    fs::write(&path, bytes).unwrap();
    assert!(load_selected(tmp.path()).is_err());
}

#[test]
fn selected_model_respects_masks_and_history_is_parseable() {
    let tmp = tempfile::tempdir().unwrap();
    let m = run_prune(&tiny(tmp.path(), 4), false).unwrap();
    let (_, model, masks) = load_selected(tmp.path()).unwrap();
    for (mask, li) in masks.iter().zip(model.prunable()) {
        let w = model.layers[li].weight().unwrap().data();
        for (k, &v) in w.iter().enumerate() {
            if mask.bits()[k] == 0 {
                assert_eq!(v, 0.0);
            }
        }
    }
    let text = fs::read_to_string(tmp.path().join("history.csv")).unwrap();
    assert_eq!(text.lines().count(), 1 + m.history.len());
    let r = m.result.unwrap();
    let from_masks = unsparse_core::pruning::weighted_sparsity(&masks);
    assert!((r.weighted_sparsity - from_masks).abs() < 1e-12);
}

#[test]
fn quantize_writes_reports_and_codebooks() {
    let tmp = tempfile::tempdir().unwrap();
    let ck = tmp.path().join("ck");
    run_prune(&tiny(&ck, 3), false).unwrap();
    let out = tmp.path().join("q");
    let modes = [QuantMode::Passthrough, QuantMode::Half, QuantMode::Codebook];
    let rows = run_quantize(&ck, &modes, SplitKind::Test, 1, &out).unwrap();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[0].delta_points, 0.0);
    assert_eq!(rows[0].baseline, rows[0].quantized);
    for r in &rows {
        assert!((r.delta_points - (r.quantized - r.baseline) * 100.0).abs() < 1e-9);
        assert!(out.join("quantized").join(mode_slug(r.mode)).join("model.bin").exists());
    }
    let (_, model, _) = load_selected(&ck).unwrap();
    let cb = out.join("quantized/4b-16b/codebooks");
    for li in model.prunable() {
        let json: serde_json::Value = serde_json::from_slice(&read(&cb, &format!("layer_{li}.json"))).unwrap();
        let n = model.layers[li].weight().unwrap().data().len();
        assert_eq!(read(&cb, &format!("layer_{li}.bin")).len(), n);
        assert!(json["centroids"].as_array().unwrap().len() <= 16);
    }
    let csv = fs::read_to_string(out.join("quantize_report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(fs::read_to_string(out.join("quantize_report.md")).unwrap().contains("4b/16b"));
    assert!(run_quantize(&ck, &[], SplitKind::Test, 1, &out).is_err());
}

#[test]
fn bench_csv_feeds_configure() {
    let tmp = tempfile::tempdir().unwrap();
    let config: BenchConfig = serde_json::from_str(
        r#"{"layers": [{"id": "a", "in_channels": 3, "out_channels": 4, "kernel": [3, 3], "input": [6, 6],
                        "padding": [1, 1]},
                       {"id": "b", "in_channels": 2, "out_channels": 2, "kernel": [2, 1], "input": [9, 1]}],
            "sparsities": [0, 90], "precisions": ["binary32", "binary16"], "batch": 4,
            "timing": {"warmup": 1, "runs": 3}}"#,
    )
    .unwrap();
    let report = run_bench(&config, 1, 5).unwrap();
    assert_eq!(report.rows.len(), 2 * 2 * 2);
    write_report(tmp.path(), &report).unwrap();
    let text = fs::read_to_string(tmp.path().join("bench.csv")).unwrap();
    assert_eq!(text.lines().next().unwrap(), CSV_HEADER);
    let rows = read_csv(&tmp.path().join("bench.csv")).unwrap();
    assert_eq!(rows, report.rows);
    let backend = configure(&rows, &["a".into(), "b".into()]).unwrap();
    for (c, r) in backend.layers.iter().zip(&rows) {
        let want = if r.sparse_ms < r.dense_ms { Backend::Sparse } else { Backend::Dense };
        assert_eq!(c.backend, want);
        assert!((r.speedup - r.dense_ms / r.sparse_ms).abs() < 1e-9 * r.speedup);
    }
    assert!(configure(&rows, &["missing".into()]).is_err());
}
