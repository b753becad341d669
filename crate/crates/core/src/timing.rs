//! Wall-clock measurement used by the autotuner and the benchmark.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

/// Warmup and repetition counts for one measurement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimingPlan {
    pub warmup: usize,
    pub runs: usize,
}

impl Default for TimingPlan {
    fn default() -> Self {
        TimingPlan { warmup: 2, runs: 9 }
    }
}

pub fn median(mut samples: Vec<Duration>) -> Duration {
    assert!(!samples.is_empty(), "median of no samples");
    samples.sort_unstable();
    let mid = samples.len() / 2;
    if samples.len() % 2 == 1 {
        samples[mid]
    } else {
        (samples[mid - 1] + samples[mid]) / 2
    }
}

/// Median wall time of `f` after `plan.warmup` untimed calls.
pub fn median_time<F: FnMut()>(plan: TimingPlan, mut f: F) -> Duration {
    for _ in 0..plan.warmup {
        f();
    }
    let samples = (0..plan.runs.max(1))
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed()
        })
        .collect();
    median(samples)
}

/// Times several closures with their runs interleaved round-robin, so slow
/// drift in machine load hits every contender equally.
pub fn median_times_interleaved(plan: TimingPlan, fs: &mut [&mut dyn FnMut()]) -> Vec<Duration> {
    for _ in 0..plan.warmup {
        for f in fs.iter_mut() {
            f();
        }
    }
    let mut samples = vec![Vec::with_capacity(plan.runs); fs.len()];
    for _ in 0..plan.runs.max(1) {
        for (f, s) in fs.iter_mut().zip(samples.iter_mut()) {
            let t = Instant::now();
            f();
            s.push(t.elapsed());
        }
    }
    samples.into_iter().map(median).collect()
}

pub fn millis(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_odd_and_even() {
        let ms = |v: &[u64]| v.iter().map(|&x| Duration::from_millis(x)).collect::<Vec<_>>();
        assert_eq!(median(ms(&[5, 1, 3])), Duration::from_millis(3));
        assert_eq!(median(ms(&[4, 1, 3, 2])), Duration::from_micros(2500));
    }

    #[test]
    fn warmup_runs_are_untimed_but_executed() {
        let mut calls = 0;
        median_time(TimingPlan { warmup: 2, runs: 9 }, || calls += 1);
        assert_eq!(calls, 11);
    }
}
