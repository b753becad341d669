//! Software emulation of IEEE 754 binary16 storage.
//!
//! Values are rounded to the nearest representable half-precision value with
//! ties to even. Magnitudes beyond the largest finite half saturate to
//! ±65504 instead of overflowing to infinity.

use crate::scalar::Scalar;

/// Largest finite binary16 value.
pub const BINARY16_MAX: f64 = 65504.0;
/// Smallest positive normal binary16 value, 2^-14.
pub const BINARY16_MIN_NORMAL: f64 = 6.103_515_625e-5;

const MANTISSA_BITS: i32 = 10;
const MIN_NORMAL_EXP: i32 = -14;

/// Unbiased binary exponent of a positive, normal f64.
#[inline]
fn exponent_of(a: f64) -> i32 {
    ((a.to_bits() >> 52) & 0x7ff) as i32 - 1023
}

/// Rounds an f64 to the nearest binary16 value (ties to even, saturating).
pub fn round_f64_to_binary16(x: f64) -> f64 {
    if x.is_nan() || x == 0.0 {
        return x;
    }
    let a = x.abs();
    if a >= BINARY16_MAX {
        return BINARY16_MAX.copysign(x);
    }
    let exp = if a < BINARY16_MIN_NORMAL {
        MIN_NORMAL_EXP
    } else {
        exponent_of(a)
    };
    // Power-of-two scaling is exact, so the only rounding is round_ties_even.
    let quantum = 2f64.powi(exp - MANTISSA_BITS);
    let q = (a / quantum).round_ties_even() * quantum;
    q.min(BINARY16_MAX).copysign(x)
}

/// Rounds any scalar to binary16 precision, keeping it in its own type.
///
/// f32 → f64 is exact, so rounding through f64 never double-rounds.
#[inline]
pub fn round_to_binary16<T: Scalar>(x: T) -> T {
    T::lit(round_f64_to_binary16(x.as_f64()))
}

/// Encodes a value as binary16 bits, rounding first.
pub fn to_binary16_bits(x: f64) -> u16 {
    if x.is_nan() {
        return 0x7e00;
    }
    let r = round_f64_to_binary16(x);
    let sign: u16 = if r.is_sign_negative() { 0x8000 } else { 0 };
    let a = r.abs();
    if a == 0.0 {
        return sign;
    }
    if a < BINARY16_MIN_NORMAL {
        let mant = (a / 2f64.powi(MIN_NORMAL_EXP - MANTISSA_BITS)) as u16;
        return sign | mant;
    }
    let exp = exponent_of(a);
    let mant = ((a / 2f64.powi(exp) - 1.0) * 1024.0) as u16;
    sign | (((exp + 15) as u16) << 10) | mant
}

/// Decodes binary16 bits into an f64 (exact).
pub fn from_binary16_bits(bits: u16) -> f64 {
    let sign = if bits & 0x8000 != 0 { -1.0 } else { 1.0 };
    let exp = ((bits >> 10) & 0x1f) as i32;
    let mant = (bits & 0x3ff) as f64;
    match exp {
        0 => sign * mant * 2f64.powi(MIN_NORMAL_EXP - MANTISSA_BITS),
        0x1f if mant == 0.0 => sign * f64::INFINITY,
        0x1f => f64::NAN,
        _ => sign * (1.0 + mant / 1024.0) * 2f64.powi(exp - 15),
    }
}
