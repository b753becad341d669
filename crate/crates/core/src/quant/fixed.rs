//! Linear fixed-point quantisation and activation saturation.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::scalar::Scalar;

/// Signed fixed-point format: one sign bit, `int_bits` integer bits and
/// `frac_bits` fractional bits; σ = 2^−frac_bits and μ = 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedPointParams {
    pub total_bits: u32,
    /// May be negative: a pure downward shift for small tensors.
    pub int_bits: i32,
    pub frac_bits: i32,
    pub sigma: f64,
    pub mu: f64,
    /// Set when the tensor was all zero and `int_bits` fell back to 0.
    pub all_zero: bool,
}

impl FixedPointParams {
    pub fn new(total_bits: u32, int_bits: i32) -> Result<Self> {
        if total_bits < 2 || total_bits > 32 {
            return Err(invalid!("total_bits {total_bits} outside [2, 32]"));
        }
        let frac_bits = total_bits as i32 - int_bits - 1;
        Ok(FixedPointParams {
            total_bits,
            int_bits,
            frac_bits,
            sigma: (-frac_bits as f64).exp2(),
            mu: 0.0,
            all_zero: false,
        })
    }

    /// Smallest representable value, −2^(total−1)·σ.
    pub fn min_value(&self) -> f64 {
        self.mu - (self.total_bits as f64 - 1.0).exp2() * self.sigma
    }

    /// Largest representable value, (2^(total−1) − 1)·σ.
    pub fn max_value(&self) -> f64 {
        self.mu + ((self.total_bits as f64 - 1.0).exp2() - 1.0) * self.sigma
    }
}

/// int_bits = ⌈log2 max|x|⌉, frac_bits = total − int_bits − 1.
pub fn fit_fixed_point<T: Scalar>(x: &[T], total_bits: u32) -> Result<FixedPointParams> {
    if x.is_empty() {
        return Err(invalid!("cannot fit fixed point to an empty tensor"));
    }
    let max = x.iter().map(|v| v.as_f64().abs()).fold(0.0, f64::max);
    if max.is_nan() || max.is_infinite() {
        return Err(invalid!("non-finite value in tensor"));
    }
    if max == 0.0 {
        let mut p = FixedPointParams::new(total_bits, 0)?;
        p.all_zero = true;
        return Ok(p);
    }
    FixedPointParams::new(total_bits, max.log2().ceil() as i32)
}

/// q = μ + σ·round((x − μ)/σ) with ties away from zero, saturated to the
/// representable range. NaN passes through.
pub fn linear_quantize(x: f64, p: &FixedPointParams) -> f64 {
    if x.is_nan() {
        return x;
    }
    let q = p.mu + p.sigma * ((x - p.mu) / p.sigma).round();
    q.clamp(p.min_value(), p.max_value())
}

/// Replaces values above `threshold·max(A)` with that limit.
pub fn saturate_activations<T: Scalar>(a: &mut [T], threshold: f64) -> Result<()> {
    if a.is_empty() {
        return Err(invalid!("cannot saturate an empty tensor"));
    }
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(invalid!("saturation threshold {threshold} outside (0, 1]"));
    }
    let max = a.iter().copied().fold(T::neg_infinity(), T::max);
    let limit = T::lit(threshold) * max;
    for v in a.iter_mut() {
        if *v > limit {
            *v = limit;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bit_split_examples() {
        let p = fit_fixed_point(&[0.5f64, -1.0], 8).unwrap();
        assert_eq!((p.int_bits, p.frac_bits, p.sigma), (0, 7, 1.0 / 128.0));
        let p = fit_fixed_point(&[3.2f64], 8).unwrap();
        assert_eq!((p.int_bits, p.frac_bits, p.sigma), (2, 5, 1.0 / 32.0));
        let p = fit_fixed_point(&[-0.4f64, 0.1], 8).unwrap();
        assert_eq!((p.int_bits, p.frac_bits, p.sigma), (-1, 8, 1.0 / 256.0));
        let z = fit_fixed_point(&[0.0f32; 3], 8).unwrap();
        assert!(z.all_zero && z.int_bits == 0);
        assert!(fit_fixed_point::<f32>(&[], 8).is_err());
        assert!(fit_fixed_point(&[1.0f32], 1).is_err());
    }

    #[test]
    fn quantize_examples() {
        let p = FixedPointParams::new(8, 0).unwrap();
        assert_eq!(linear_quantize(0.0, &p), 0.0);
        assert_eq!(linear_quantize(0.7, &p), 0.703125);
        let p = FixedPointParams::new(8, 2).unwrap();
        assert_eq!(linear_quantize(3.2, &p), 3.1875);
        assert!(linear_quantize(f64::NAN, &p).is_nan());
        assert_eq!(linear_quantize(100.0, &p), p.max_value());
        assert_eq!(linear_quantize(-100.0, &p), -4.0);
        // ties go away from zero
        let p = FixedPointParams::new(4, 3).unwrap();
        assert_eq!(linear_quantize(2.5, &p), 3.0);
        assert_eq!(linear_quantize(-2.5, &p), -3.0);
    }

    #[test]
    fn saturation_examples() {
        let mut a = [1.0f32, 10.0, 9.95, 9.0];
        saturate_activations(&mut a, 1.0).unwrap();
        assert_eq!(a, [1.0, 10.0, 9.95, 9.0]);
        saturate_activations(&mut a, 0.99).unwrap();
        let lim = 0.99f32 * 10.0;
        assert_eq!(a, [1.0, lim, lim, 9.0]);
        let mut e = [4.0f64; 5];
        saturate_activations(&mut e, 0.99).unwrap();
        assert!(e.iter().all(|&v| v == 0.99 * 4.0));
        assert!(saturate_activations::<f32>(&mut [], 0.99).is_err());
        assert!(saturate_activations(&mut [1.0f32], 0.0).is_err());
    }
}
