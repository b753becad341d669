//! Sub-batch autotuning.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::DenseTensor4;
use crate::timing::{median_time, millis, TimingPlan};

use super::{sparse_conv_forward, CsrFilter, ExecConfig};

/// Default sub-batch sizes tried by [`autotune_sb`].
pub const SB_CANDIDATES: [usize; 3] = [2, 4, 8];

/// Chosen configuration plus the measured median per candidate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AutotuneResult {
    pub config: ExecConfig,
    /// `(sub_batch, median ms)` in candidate order.
    pub timings: Vec<(usize, f64)>,
}

/// Times every candidate sub-batch that divides the batch and returns the
/// fastest. Ties go to the smaller sub-batch. Falls back to 1 when no
/// candidate divides the batch.
pub fn autotune_sb<T: Scalar>(
    input: &DenseTensor4<T>,
    filter: &CsrFilter<T>,
    candidates: &[usize],
    worker_count: usize,
    plan: TimingPlan,
) -> Result<AutotuneResult> {
    let batch = input.shape().n;
    let mut timings = Vec::new();
    let mut best: Option<(usize, f64)> = None;
    let mut sorted: Vec<usize> = candidates.iter().copied().filter(|&sb| sb > 0 && batch % sb == 0).collect();
    sorted.sort_unstable();
    sorted.dedup();
    for sb in sorted {
        let config = ExecConfig::new(sb, worker_count);
        // surface errors once instead of inside the timed loop
        sparse_conv_forward(input, filter, &config)?;
        let ms = millis(median_time(plan, || {
            std::hint::black_box(sparse_conv_forward(input, filter, &config).ok());
        }));
        timings.push((sb, ms));
        if best.map_or(true, |(_, b)| ms < b) {
            best = Some((sb, ms));
        }
    }
    let sub_batch = best.map_or(1, |(sb, _)| sb);
    Ok(AutotuneResult {
        config: ExecConfig::new(sub_batch, worker_count),
        timings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse::build_csr;
    use crate::tensor::ConvGeometry;

    fn case(batch: usize) -> (DenseTensor4<f32>, CsrFilter<f32>) {
        let g = ConvGeometry::new(4, 4, (3, 3), (6, 6), (1, 1), (1, 1)).unwrap();
        let w = DenseTensor4::from_fn(g.weight_shape(), |d, c, y, x| ((d + c + y + x) % 3) as f32 - 1.0);
        let x = DenseTensor4::from_fn(g.input_shape(batch), |b, c, y, x| (b + c * y + x) as f32 * 0.1);
        (x, build_csr(&w, &g).unwrap())
    }

    #[test]
    fn only_divisors_are_tried() {
        let (x, f) = case(12);
        let r = autotune_sb(&x, &f, &SB_CANDIDATES, 1, TimingPlan { warmup: 0, runs: 1 }).unwrap();
        let tried: Vec<usize> = r.timings.iter().map(|t| t.0).collect();
        assert_eq!(tried, vec![2, 4]);
        assert!(tried.contains(&r.config.sub_batch));
    }

    #[test]
    fn prime_batch_falls_back_to_one() {
        let (x, f) = case(7);
        let r = autotune_sb(&x, &f, &SB_CANDIDATES, 1, TimingPlan { warmup: 0, runs: 1 }).unwrap();
        assert_eq!(r.config.sub_batch, 1);
        assert!(r.timings.is_empty());
    }
}
