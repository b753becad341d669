//! One-dimensional KMeans codebooks.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::scalar::Scalar;

use super::fixed::{fit_fixed_point, linear_quantize, FixedPointParams};

/// Lloyd iteration cap.
pub const MAX_ITERATIONS: usize = 100;

/// Starting centroids for Lloyd refinement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KMeansInit {
    /// Centroid k at the (k + 0.5)/ω quantile of the data.
    Quantile,
    /// Globally optimal contiguous partition of the sorted data.
    #[default]
    Optimal,
}

/// Converged clustering of a 1-D sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansResult {
    /// Ascending.
    pub centroids: Vec<f64>,
    pub assignments: Vec<usize>,
    pub cost: f64,
    /// Objective after initialization and after every Lloyd iteration.
    pub history: Vec<f64>,
}

fn cost_of(values: &[f64], centroids: &[f64], assign: &[usize]) -> f64 {
    values.iter().zip(assign).map(|(v, &a)| (v - centroids[a]).powi(2)).sum()
}

/// Index of the nearest centroid; ties go to the lower index.
fn nearest(v: f64, centroids: &[f64]) -> usize {
    let mut best = 0;
    for (k, c) in centroids.iter().enumerate().skip(1) {
        if (v - c).abs() < (v - centroids[best]).abs() {
            best = k;
        }
    }
    best
}

fn quantile_seeds(sorted: &[f64], k: usize) -> Vec<f64> {
    let n = sorted.len();
    (0..k)
        .map(|j| {
            let pos = ((j as f64 + 0.5) / k as f64 * n as f64).floor() as usize;
            sorted[pos.min(n - 1)]
        })
        .collect()
}

/// Optimal 1-D k-means by dynamic programming over the sorted values,
/// with divide-and-conquer on the monotone split points.
fn optimal_seeds(sorted: &[f64], k: usize) -> Vec<f64> {
    let n = sorted.len();
    let mut s1 = vec![0.0; n + 1];
    let mut s2 = vec![0.0; n + 1];
    for (i, v) in sorted.iter().enumerate() {
        s1[i + 1] = s1[i] + v;
        s2[i + 1] = s2[i] + v * v;
    }
    // squared error of sorted[a..b]
    let sse = |a: usize, b: usize| -> f64 {
        let m = (b - a) as f64;
        let s = s1[b] - s1[a];
        (s2[b] - s2[a] - s * s / m).max(0.0)
    };
    let mut prev: Vec<f64> = (0..=n).map(|i| if i == 0 { 0.0 } else { sse(0, i) }).collect();
    let mut splits = vec![vec![0usize; n + 1]; k];
    for layer in splits.iter_mut().skip(1) {
        let mut cur = vec![f64::INFINITY; n + 1];
        // cur[i] = min over j < i of prev[j] + sse(j, i)
        fn solve(
            lo: usize,
            hi: usize,
            opt_lo: usize,
            opt_hi: usize,
            prev: &[f64],
            cur: &mut [f64],
            arg: &mut [usize],
            sse: &dyn Fn(usize, usize) -> f64,
        ) {
            if lo > hi {
                return;
            }
            let mid = (lo + hi) / 2;
            let mut best = (f64::INFINITY, opt_lo);
            for j in opt_lo..=opt_hi.min(mid - 1) {
                let c = prev[j] + sse(j, mid);
                if c < best.0 {
                    best = (c, j);
                }
            }
            cur[mid] = best.0;
            arg[mid] = best.1;
            if mid > lo {
                solve(lo, mid - 1, opt_lo, best.1, prev, cur, arg, sse);
            }
            solve(mid + 1, hi, best.1, opt_hi, prev, cur, arg, sse);
        }
        solve(1, n, 0, n - 1, &prev, &mut cur, layer, &sse);
        prev = cur;
    }
    let mut bounds = vec![n];
    let mut i = n;
    for layer in splits.iter().skip(1).rev() {
        i = layer[i];
        bounds.push(i);
    }
    bounds.push(0);
    bounds.reverse();
    bounds
        .windows(2)
        .filter(|w| w[1] > w[0])
        .map(|w| (s1[w[1]] - s1[w[0]]) / (w[1] - w[0]) as f64)
        .collect()
}

/// KMeans on `values` with `k` clusters: seeding, then Lloyd iterations
/// until assignments stop changing. `k` shrinks to the number of
/// distinct values.
pub fn kmeans_1d(values: &[f64], k: usize, init: KMeansInit) -> Result<KMeansResult> {
    if values.is_empty() || k == 0 {
        return Err(invalid!("kmeans needs data and at least one cluster"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(invalid!("kmeans input must be finite"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut distinct = sorted.clone();
    distinct.dedup();
    let k = k.min(distinct.len());
    let mut centroids = match init {
        KMeansInit::Quantile if k == distinct.len() => distinct.clone(),
        KMeansInit::Quantile => quantile_seeds(&sorted, k),
        KMeansInit::Optimal => optimal_seeds(&sorted, k),
    };
    centroids.sort_by(f64::total_cmp);
    let mut assign: Vec<usize> = values.iter().map(|&v| nearest(v, &centroids)).collect();
    let mut history = vec![cost_of(values, &centroids, &assign)];
    for _ in 0..MAX_ITERATIONS {
        let mut sum = vec![0.0; k];
        let mut count = vec![0usize; k];
        for (&v, &a) in values.iter().zip(&assign) {
            sum[a] += v;
            count[a] += 1;
        }
        for j in 0..k {
            if count[j] > 0 {
                centroids[j] = sum[j] / count[j] as f64;
            }
        }
        let next: Vec<usize> = values.iter().map(|&v| nearest(v, &centroids)).collect();
        history.push(cost_of(values, &centroids, &next));
        if next == assign {
            break;
        }
        assign = next;
    }
    let cost = *history.last().expect("non-empty history");
    Ok(KMeansResult { centroids, assignments: assign, cost, history })
}

/// Shared-value representation of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    pub omega: usize,
    pub psi: u32,
    /// Centroids before reduction; index 0 is exactly 0.0 when pinned.
    pub centroids: Vec<f64>,
    /// Centroids reduced to ψ-bit fixed point.
    pub quantized: Vec<f64>,
    pub params: FixedPointParams,
    pub assignments: Vec<u32>,
    pub zero_pinned: bool,
    pub cost: f64,
}

impl Codebook {
    /// w_q: every weight replaced by its quantized centroid.
    pub fn reconstruct(&self) -> Vec<f64> {
        self.assignments.iter().map(|&a| self.quantized[a as usize]).collect()
    }

    /// Assignment indices as one byte each.
    pub fn assignment_bytes(&self) -> Result<Vec<u8>> {
        if self.centroids.len() > 256 {
            return Err(invalid!("{} centroids do not fit one byte", self.centroids.len()));
        }
        Ok(self.assignments.iter().map(|&a| a as u8).collect())
    }
}

/// Clusters the non-zero weights into at most ω values (one of them a
/// pinned zero when the layer has zeros) and reduces the centroids to ψ
/// bits.
pub fn kmeans_codebook<T: Scalar>(weights: &[T], omega: usize, psi: u32, init: KMeansInit) -> Result<Codebook> {
    if omega == 0 {
        return Err(invalid!("codebook needs at least one centroid"));
    }
    if psi != 8 && psi != 16 {
        return Err(invalid!("centroid width {psi} not supported (8 or 16)"));
    }
    let w: Vec<f64> = weights.iter().map(|v| v.as_f64()).collect();
    let nonzero: Vec<f64> = w.iter().copied().filter(|&v| v != 0.0).collect();
    let zero_pinned = nonzero.len() < w.len();
    let budget = omega - usize::from(zero_pinned);
    let mut centroids = Vec::with_capacity(omega);
    if zero_pinned {
        centroids.push(0.0);
    }
    let offset = centroids.len();
    let mut assignments = vec![0u32; w.len()];
    let mut cost = 0.0;
    if !nonzero.is_empty() {
        if budget == 0 {
            // only the pinned zero is left
            cost = nonzero.iter().map(|v| v * v).sum();
        } else {
            let km = kmeans_1d(&nonzero, budget, init)?;
            centroids.extend(&km.centroids);
            let mut it = km.assignments.iter();
            for (a, &v) in assignments.iter_mut().zip(&w) {
                if v != 0.0 {
                    *a = (it.next().expect("one assignment per non-zero") + offset) as u32;
                }
            }
            cost = km.cost;
        }
    }
    let params = fit_fixed_point(&centroids, psi)?;
    let quantized = centroids.iter().map(|&c| linear_quantize(c, &params)).collect();
    Ok(Codebook { omega, psi, centroids, quantized, params, assignments, zero_pinned, cost })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn same_partition(a: &[usize], b: &[usize]) -> bool {
        (0..a.len()).all(|i| (0..a.len()).all(|j| (a[i] == a[j]) == (b[i] == b[j])))
    }

    #[test]
    fn four_point_example() {
        let r = kmeans_1d(&[1.0, 1.1, -2.0, -2.1], 2, KMeansInit::Optimal).unwrap();
        assert!((r.centroids[0] + 2.05).abs() < 1e-12 && (r.centroids[1] - 1.05).abs() < 1e-12);
        assert!(same_partition(&r.assignments, &[0, 0, 1, 1]));
        let q = kmeans_1d(&[1.0, 1.1, -2.0, -2.1], 2, KMeansInit::Quantile).unwrap();
        assert_eq!(q.assignments, r.assignments);
    }

    #[test]
    fn constant_layer_has_one_exact_centroid() {
        let cb = kmeans_codebook(&[0.3f32; 6], 4, 16, KMeansInit::Optimal).unwrap();
        assert_eq!(cb.centroids, vec![0.3f32 as f64]);
        assert_eq!(cb.cost, 0.0);
        assert!(!cb.zero_pinned);
    }

    #[test]
    fn zeros_stay_zero() {
        let w = [0.0f32, 0.5, -0.25, 0.0, 0.75, 0.001];
        let cb = kmeans_codebook(&w, 3, 16, KMeansInit::Optimal).unwrap();
        assert!(cb.zero_pinned);
        assert_eq!(cb.centroids[0], 0.0);
        let r = cb.reconstruct();
        assert_eq!((r[0], r[3]), (0.0, 0.0));
        assert!(r[1] != 0.0 && r[2] != 0.0 && r[4] != 0.0);
        let mut distinct = r.clone();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        assert!(distinct.len() <= 3);
        assert_eq!(cb.assignment_bytes().unwrap().len(), 6);
    }

    #[test]
    fn small_budgets_and_bad_widths() {
        assert_eq!(kmeans_codebook(&[0.0f32, 1.0], 1, 8, KMeansInit::Optimal).unwrap().reconstruct(), vec![0.0, 0.0]);
        assert!(kmeans_codebook(&[1.0f32], 2, 4, KMeansInit::Optimal).is_err());
        let cb = kmeans_codebook(&[1.0f32, 2.0], 16, 8, KMeansInit::Optimal).unwrap();
        assert_eq!(cb.centroids.len(), 2);
    }

    #[test]
    fn objective_never_increases() {
        let v: Vec<f64> = (0..200).map(|i| ((i * 7919) % 211) as f64 / 37.0 - 2.0).collect();
        for init in [KMeansInit::Quantile, KMeansInit::Optimal] {
            let r = kmeans_1d(&v, 5, init).unwrap();
            assert!(r.history.windows(2).all(|w| w[1] <= w[0] + 1e-9), "{:?}", r.history);
        }
    }
}
