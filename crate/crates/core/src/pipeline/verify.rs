//! The verify command: the oracle suite as a release gate.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::Result;
use crate::quant::{kmeans_1d, linear_quantize, FixedPointParams, KMeansInit};
use crate::sparse::{build_csr, csr_to_dense, export_csr, hex, read_csr, sparse_conv_forward, ExecConfig};
use crate::tensor::{dense_conv_reference, ConvGeometry, DenseTensor4, PrecisionMode};
use crate::trainer::{Init, LayerSpec, Model, ModelSpec};

#[derive(Debug, Clone)]
pub struct VerifyOptions {
    pub seed: u64,
    pub conv_cases: usize,
    pub csr_cases: usize,
    /// Corrupts every serialized filter before it is read back, so the
    /// roundtrip check must fail.
    pub inject_fault: bool,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions { seed: 0, conv_cases: 1000, csr_cases: 500, inject_fault: false }
    }
}

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "| check | result | seconds | detail |");
        let _ = writeln!(s, "|---|---|---:|---|");
        for c in &self.checks {
            let verdict = if c.passed { "pass" } else { "FAIL" };
            let _ = writeln!(s, "| {} | {} | {:.2} | {} |", c.name, verdict, c.seconds, c.detail);
        }
        s
    }
}

type Outcome = Result<(bool, String)>;

fn timed(name: &'static str, f: impl FnOnce() -> Outcome) -> CheckResult {
    let start = Instant::now();
    let (passed, detail) = match f() {
        Ok(v) => v,
        Err(e) => (false, format!("error: {e}")),
    };
    CheckResult { name, passed, detail, seconds: start.elapsed().as_secs_f64() }
}

/// Runs every check; `workers` bounds the thread counts exercised.
pub fn run_verify(opts: &VerifyOptions, workers: usize) -> VerifyReport {
    let workers = workers.max(1);
    let seed = opts.seed;
    let checks = vec![
        timed("sparse conv == dense reference", || check_conv_oracle(opts.conv_cases, workers, seed)),
        timed("sparse conv worker/sub-batch invariance", || check_invariance(workers, seed ^ 0x11)),
        timed("CSR roundtrip + uniform nnz", || check_csr(opts.csr_cases, opts.inject_fault, seed ^ 0x22)),
        timed("linear quantizer error <= sigma/2", check_quantizer),
        timed("KMeans cost == brute force", || check_kmeans(seed ^ 0x33)),
        timed("analytic == finite-difference gradients", || check_gradients(seed ^ 0x44)),
    ];
    VerifyReport { checks }
}

const KERNELS: [(usize, usize); 4] = [(1, 1), (3, 3), (3, 1), (2, 1)];

fn random_geometry(rng: &mut ChaCha8Rng) -> Result<ConvGeometry> {
    let (fh, fw) = *KERNELS.choose(rng).expect("non-empty");
    let stride = (rng.gen_range(1..=2), rng.gen_range(1..=2));
    let pad = (rng.gen_range(0..=fh / 2), rng.gen_range(0..=fw / 2));
    // padded extent minus filter must be a multiple of the stride
    let ih = fh - 2 * pad.0 + stride.0 * rng.gen_range(pad.0..7);
    let iw = if fw == 1 && rng.gen_bool(0.5) {
        1 + stride.1 * rng.gen_range(0..2) * usize::from(pad.1 == 0)
    } else {
        fw - 2 * pad.1 + stride.1 * rng.gen_range(pad.1..7)
    };
    ConvGeometry::new(rng.gen_range(1..=16), rng.gen_range(1..=16), (fh, fw), (ih, iw), stride, pad)
}

fn random_weights(rng: &mut ChaCha8Rng, g: &ConvGeometry, sparsity: f64) -> DenseTensor4<f32> {
    DenseTensor4::from_fn(g.weight_shape(), |_, _, _, _| {
        if rng.gen_bool(sparsity) { 0.0 } else { rng.gen_range(-1.0f32..1.0) }
    })
}

fn check_conv_oracle(cases: usize, workers: usize, seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = [0.0f64; 2];
    let mut failures = 0;
    for case in 0..cases {
        let g = random_geometry(&mut rng)?;
        let batch = rng.gen_range(1..=8);
        let sparsity = rng.gen_range(0.0..0.99);
        let precision = if case % 2 == 0 { PrecisionMode::Binary32 } else { PrecisionMode::Binary16 };
        let x = DenseTensor4::from_fn(g.input_shape(batch), |_, _, _, _| rng.gen_range(-1.0f32..1.0))
            .with_precision(precision);
        let w = random_weights(&mut rng, &g, sparsity).with_precision(precision);
        let divisors: Vec<usize> = (1..=batch).filter(|d| batch % d == 0).collect();
        let config = ExecConfig::new(*divisors.choose(&mut rng).expect("1 divides"), rng.gen_range(1..=workers));
        let reference = dense_conv_reference(&x, &w, &g)?;
        let y = sparse_conv_forward(&x, &build_csr(&w, &g)?, &config)?;
        let (slot, tol) = match precision {
            PrecisionMode::Binary32 => (0, 1e-5),
            PrecisionMode::Binary16 => (1, 2e-2),
        };
        let err = reference
            .data()
            .iter()
            .zip(y.data())
            .map(|(&r, &v)| (r as f64 - v as f64).abs() / (r as f64).abs().max(1.0))
            .fold(0.0, f64::max);
        worst[slot] = worst[slot].max(err);
        if err > tol || y.shape() != reference.shape() {
            failures += 1;
        }
    }
    Ok((
        failures == 0,
        format!("{cases} cases, {failures} failed, worst rel err {:.1e} (b32) {:.1e} (b16)", worst[0], worst[1]),
    ))
}

fn check_invariance(workers: usize, seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut runs = 0;
    for _ in 0..8 {
        let g = random_geometry(&mut rng)?;
        let x = DenseTensor4::from_fn(g.input_shape(8), |_, _, _, _| rng.gen_range(-1.0f32..1.0));
        let f = build_csr(&random_weights(&mut rng, &g, 0.8), &g)?;
        let base = sparse_conv_forward(&x, &f, &ExecConfig::new(1, 1))?;
        for sb in [1, 2, 4, 8] {
            for w in [1, 2, workers.max(3)] {
                let y = sparse_conv_forward(&x, &f, &ExecConfig::new(sb, w))?;
                runs += 1;
                if !base.data().iter().zip(y.data()).all(|(a, b)| a.to_bits() == b.to_bits()) {
                    return Ok((false, format!("output differs at sb {sb}, workers {w}")));
                }
            }
        }
    }
    Ok((true, format!("{runs} schedules bitwise identical")))
}

fn check_csr(cases: usize, inject_fault: bool, seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = Vec::new();
    for case in 0..cases {
        let g = random_geometry(&mut rng)?;
        let precision = if case % 2 == 0 { PrecisionMode::Binary32 } else { PrecisionMode::Binary16 };
        let sparsity = rng.gen_range(0.0..1.0);
        let w = random_weights(&mut rng, &g, sparsity).with_precision(precision);
        let f = build_csr(&w, &g)?;
        let back = csr_to_dense(&f)?;
        if !w.data().iter().zip(back.data()).all(|(a, b)| a.to_bits() == b.to_bits()) {
            failures.push(format!("case {case}: dense roundtrip"));
            continue;
        }
        let rp = f.row_ptr();
        if rp.windows(2).any(|p| p[1] - p[0] != rp[1] - rp[0]) {
            failures.push(format!("case {case}: non-uniform row_ptr"));
            continue;
        }
        let (mut bytes, sidecar) = export_csr(&f)?;
        if inject_fault {
            let last = bytes.len() - 1;
            bytes[last] ^= 0x40;
        }
        if hex(&Sha256::digest(&bytes)) != sidecar.checksum {
            failures.push(format!("case {case}: checksum mismatch"));
            continue;
        }
        let same = match read_csr::<_, f32>(&mut bytes.as_slice()) {
            Ok(r) => {
                r.row_ptr() == f.row_ptr()
                    && r.offsets() == f.offsets()
                    && r.precision() == f.precision()
                    && r.weights().iter().zip(f.weights()).all(|(a, b)| a.to_bits() == b.to_bits())
            }
            Err(_) => false,
        };
        if !same {
            failures.push(format!("case {case}: serialized roundtrip"));
        }
    }
    let detail = match failures.first() {
        None => format!("{cases} filters"),
        Some(first) => format!("{} of {cases} failed, first {first}", failures.len()),
    };
    Ok((failures.is_empty(), detail))
}

fn check_quantizer() -> Outcome {
    const GRID: usize = 10_000;
    let mut worst_ratio: f64 = 0.0;
    for (bits, int_bits) in [(16u32, 3i32), (16, 0), (8, 1), (4, 0), (16, -4)] {
        let p = FixedPointParams::new(bits, int_bits)?;
        let (lo, hi) = (p.min_value(), p.max_value());
        for i in 0..GRID {
            let x = lo + (hi - lo) * i as f64 / (GRID - 1) as f64;
            let err = (linear_quantize(x, &p) - x).abs();
            worst_ratio = worst_ratio.max(err / p.sigma);
        }
    }
    Ok((worst_ratio <= 0.5, format!("5 formats x {GRID} points, worst |q-x| = {worst_ratio:.4} sigma")))
}

/// Smallest SSE over every assignment of `values` to at most `k` labels.
pub fn brute_force_kmeans_cost(values: &[f64], k: usize) -> f64 {
    let n = values.len();
    let mut labels = vec![0usize; n];
    let mut best = f64::INFINITY;
    loop {
        let mut sum = vec![0.0; k];
        let mut count = vec![0usize; k];
        for (&v, &l) in values.iter().zip(&labels) {
            sum[l] += v;
            count[l] += 1;
        }
        let cost: f64 = values
            .iter()
            .zip(&labels)
            .map(|(&v, &l)| (v - sum[l] / count[l] as f64).powi(2))
            .sum();
        best = best.min(cost);
        let mut i = 0;
        while i < n {
            labels[i] += 1;
            if labels[i] < k {
                break;
            }
            labels[i] = 0;
            i += 1;
        }
        if i == n {
            return best;
        }
    }
}

fn check_kmeans(seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for n in [1usize, 2, 5, 8, 10, 12] {
        for k in 1..=3 {
            for _ in 0..3 {
                let values: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
                let got = kmeans_1d(&values, k, KMeansInit::Optimal)?.cost;
                let want = brute_force_kmeans_cost(&values, k);
                worst = worst.max((got - want).abs() / want.max(1e-12));
                cases += 1;
            }
        }
    }
    Ok((worst <= 1e-9, format!("{cases} sets, worst rel cost gap {worst:.1e}")))
}

fn gradient_specs() -> Vec<(&'static str, ModelSpec, Vec<u16>)> {
    let conv2d = |out, k: usize, s, p| LayerSpec::Conv2d { out_channels: out, kernel: [k, k], stride: [s, s], padding: [p, p] };
    vec![
        (
            "conv2d+pool+dense+softmax",
            ModelSpec {
                init: Init::Glorot,
                input: [2, 6, 6],
                layers: vec![
                    conv2d(3, 3, 1, 1),
                    LayerSpec::Relu,
                    LayerSpec::MaxPool { size: 2 },
                    LayerSpec::Flatten,
                    LayerSpec::Dense { units: 3 },
                    LayerSpec::SoftmaxXent,
                ],
            },
            vec![0, 2],
        ),
        (
            "strided conv2d",
            ModelSpec {
                init: Init::Glorot,
                input: [1, 7, 7],
                layers: vec![conv2d(2, 3, 2, 0), LayerSpec::Flatten, LayerSpec::Dense { units: 2 }, LayerSpec::SoftmaxXent],
            },
            vec![1, 0],
        ),
        (
            "conv1d autoencoder (mse)",
            ModelSpec {
                init: Init::He,
                input: [2, 8, 1],
                layers: vec![
                    LayerSpec::Conv1d { out_channels: 3, kernel: 3, stride: 1, padding: 1 },
                    LayerSpec::Relu,
                    LayerSpec::Conv1d { out_channels: 2, kernel: 2, stride: 1, padding: 0 },
                    LayerSpec::Relu,
                    LayerSpec::Conv1d { out_channels: 2, kernel: 2, stride: 1, padding: 1 },
                ],
            },
            vec![],
        ),
    ]
}

fn check_gradients(seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    let mut probes = 0;
    for (_, spec, labels) in gradient_specs() {
        let mut model = Model::<f64>::build(&spec, rng.gen())?;
        for l in &mut model.layers {
            if let Some(b) = l.bias_mut() {
                b.iter_mut().for_each(|v| *v = rng.gen_range(-0.2..0.2));
            }
        }
        let x = DenseTensor4::from_fn(model.input_shape(2), |_, _, _, _| rng.gen_range(-1.0..1.0));
        let (_, grads) = model.gradients(&x, &labels)?;
        for li in model.prunable() {
            let nw = model.layers[li].weight().map_or(0, |w| w.data().len());
            let nb = model.layers[li].bias().map_or(0, <[f64]>::len);
            let g = grads.layers[li].as_ref().expect("prunable layers have gradients");
            for k in 0..nw + nb {
                let probe = |delta: f64| -> Result<f64> {
                    let mut m = model.clone();
                    if k < nw {
                        m.layers[li].weight_mut().expect("weight").data_mut()[k] += delta;
                    } else {
                        m.layers[li].bias_mut().expect("bias")[k - nw] += delta;
                    }
                    m.loss(&x, &labels)
                };
                let numeric = (probe(eps)? - probe(-eps)?) / (2.0 * eps);
                let analytic = if k < nw { g.weight[k] } else { g.bias[k - nw] };
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
                worst = worst.max(rel);
                probes += 1;
            }
        }
    }
    Ok((worst < 1e-3, format!("{probes} parameters, worst rel err {worst:.1e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> VerifyOptions {
        VerifyOptions { seed: 3, conv_cases: 40, csr_cases: 40, inject_fault: false }
    }

    #[test]
    fn clean_run_passes() {
        let r = run_verify(&small(), 2);
        assert!(r.passed(), "{}", r.table());
        assert_eq!(r.checks.len(), 6);
    }

    #[test]
    fn injected_fault_fails_roundtrip_only() {
        let r = run_verify(&VerifyOptions { inject_fault: true, ..small() }, 2);
        assert!(!r.passed());
        let failed: Vec<&str> = r.checks.iter().filter(|c| !c.passed).map(|c| c.name).collect();
        assert_eq!(failed, ["CSR roundtrip + uniform nnz"]);
    }

    #[test]
    fn brute_force_on_known_set() {
        // {0, 1} and {10}: SSE 0.5
        assert!((brute_force_kmeans_cost(&[0.0, 1.0, 10.0], 2) - 0.5).abs() < 1e-12);
        assert_eq!(brute_force_kmeans_cost(&[3.0, 3.0], 1), 0.0);
    }
}
