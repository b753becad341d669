use rayon::prelude::*;

use crate::error::{shape_err, Result};
use crate::scalar::Scalar;

use super::{ConvGeometry, DenseTensor4, Shape4};

/// Output channels computed together by [`dense_conv_fast`].
const CHANNEL_BLOCK: usize = 4;

fn check_input<T: Scalar>(input: &DenseTensor4<T>, g: &ConvGeometry) -> Result<()> {
    let s = input.shape();
    if (s.c, s.h, s.w) != (g.in_channels, g.in_h, g.in_w) {
        return Err(shape_err!(
            "input {s} does not match geometry C={} X_h={} X_w={}",
            g.in_channels,
            g.in_h,
            g.in_w
        ));
    }
    Ok(())
}

fn check_weights<T: Scalar>(weights: &DenseTensor4<T>, g: &ConvGeometry) -> Result<()> {
    if weights.shape() != g.weight_shape() {
        return Err(shape_err!(
            "weights {} do not match geometry {}",
            weights.shape(),
            g.weight_shape()
        ));
    }
    Ok(())
}

/// Materializes the zero border the precomputed tap offsets assume.
pub fn zero_pad<T: Scalar>(input: &DenseTensor4<T>, g: &ConvGeometry) -> Result<DenseTensor4<T>> {
    check_input(input, g)?;
    let s = input.shape();
    if g.pad_h == 0 && g.pad_w == 0 {
        return Ok(input.clone());
    }
    let ps = g.padded_shape(s.n);
    let mut data = vec![T::zero(); ps.len()];
    for b in 0..s.n {
        for c in 0..s.c {
            for y in 0..s.h {
                let src = s.flatten(b, c, y, 0);
                let dst = ps.flatten(b, c, y + g.pad_h, g.pad_w);
                data[dst..dst + s.w].copy_from_slice(&input.data()[src..src + s.w]);
            }
        }
    }
    DenseTensor4::new(ps, data, input.precision())
}

/// Extracts the `(h, w)` interior starting at `(top, left)` of every plane.
pub fn crop<T: Scalar>(
    padded: &DenseTensor4<T>,
    top: usize,
    left: usize,
    h: usize,
    w: usize,
) -> Result<DenseTensor4<T>> {
    let ps = padded.shape();
    if top + h > ps.h || left + w > ps.w {
        return Err(shape_err!("crop {h}x{w}+{top}+{left} outside {ps}"));
    }
    let s = Shape4::new(ps.n, ps.c, h, w);
    let mut data = Vec::with_capacity(s.len());
    for b in 0..ps.n {
        for c in 0..ps.c {
            for y in 0..h {
                let src = ps.flatten(b, c, y + top, left);
                data.extend_from_slice(&padded.data()[src..src + w]);
            }
        }
    }
    DenseTensor4::new(s, data, padded.precision())
}

/// Naive cross-correlation with implicit zero padding.
///
/// Every output value sums over (c, kh, kw) in ascending order, skipping
/// taps that fall on the border. This is the correctness oracle for the
/// faster engines.
pub fn dense_conv_reference<T: Scalar>(
    input: &DenseTensor4<T>,
    weights: &DenseTensor4<T>,
    g: &ConvGeometry,
) -> Result<DenseTensor4<T>> {
    check_input(input, g)?;
    check_weights(weights, g)?;
    let n = input.shape().n;
    let precision = input.precision().combine(weights.precision());
    let os = g.output_shape(n);
    let mut out = vec![T::zero(); os.len()];
    for b in 0..n {
        for d in 0..g.out_channels {
            for oy in 0..os.h {
                for ox in 0..os.w {
                    let mut acc = T::zero();
                    for c in 0..g.in_channels {
                        for kh in 0..g.filter_h {
                            let y = (oy * g.stride_h + kh) as isize - g.pad_h as isize;
                            if y < 0 || y >= g.in_h as isize {
                                continue;
                            }
                            for kw in 0..g.filter_w {
                                let x = (ox * g.stride_w + kw) as isize - g.pad_w as isize;
                                if x < 0 || x >= g.in_w as isize {
                                    continue;
                                }
                                acc += weights.get(d, c, kh, kw) * input.get(b, c, y as usize, x as usize);
                            }
                        }
                    }
                    out[os.flatten(b, d, oy, ox)] = precision.store(acc);
                }
            }
        }
    }
    DenseTensor4::new(os, out, precision)
}

/// `out[r, col] += w · x[base + r·s_h·P_w + col·s_w]` over one output plane.
///
/// `x` is one padded sample and `base` the tap offset. Planes with a single
/// output column (one-dimensional layers) run as one strided sweep.
#[inline]
pub(crate) fn axpy_plane<T: Scalar>(out: &mut [T], w: T, x: &[T], base: usize, g: &ConvGeometry) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let row_step = g.stride_h * g.padded_w();
    if ow == 1 {
        if row_step == 1 {
            for (o, &xv) in out.iter_mut().zip(&x[base..base + oh]) {
                *o += w * xv;
            }
        } else {
            for (r, o) in out.iter_mut().enumerate() {
                *o += w * x[base + r * row_step];
            }
        }
        return;
    }
    for (r, row) in out.chunks_exact_mut(ow).enumerate() {
        let start = base + r * row_step;
        if g.stride_w == 1 {
            for (o, &xv) in row.iter_mut().zip(&x[start..start + ow]) {
                *o += w * xv;
            }
        } else {
            for (col, o) in row.iter_mut().enumerate() {
                *o += w * x[start + col * g.stride_w];
            }
        }
    }
}

/// Dot product with four interleaved partial sums, combined pairwise.
#[inline]
fn dot_lanes<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `Σ gy[r, col] · x[base + r·s_h·P_w + col·s_w]`, the weight-gradient
/// counterpart of [`axpy_plane`].
#[inline]
pub(crate) fn dot_plane<T: Scalar>(gy: &[T], x: &[T], base: usize, g: &ConvGeometry) -> T {
    let ow = g.out_w();
    let row_step = g.stride_h * g.padded_w();
    if ow == 1 {
        if row_step == 1 {
            return dot_lanes(gy, &x[base..base + gy.len()]);
        }
        return gy.iter().enumerate().map(|(r, &gv)| gv * x[base + r * row_step]).fold(T::zero(), |a, v| a + v);
    }
    let mut acc = T::zero();
    for (r, row) in gy.chunks_exact(ow).enumerate() {
        let start = base + r * row_step;
        if g.stride_w == 1 {
            for (&gv, &xv) in row.iter().zip(&x[start..start + ow]) {
                acc += gv * xv;
            }
        } else {
            for (col, &gv) in row.iter().enumerate() {
                acc += gv * x[start + col * g.stride_w];
            }
        }
    }
    acc
}

/// `gx[base + r·s_h·P_w + col·s_w] += w · gy[r, col]`, the input-gradient
/// counterpart of [`axpy_plane`].
#[inline]
pub(crate) fn scatter_plane<T: Scalar>(gx: &mut [T], w: T, gy: &[T], base: usize, g: &ConvGeometry) {
    let ow = g.out_w();
    let row_step = g.stride_h * g.padded_w();
    if ow == 1 {
        if row_step == 1 {
            for (o, &gv) in gx[base..base + gy.len()].iter_mut().zip(gy) {
                *o += w * gv;
            }
        } else {
            for (r, &gv) in gy.iter().enumerate() {
                gx[base + r * row_step] += w * gv;
            }
        }
        return;
    }
    for (r, row) in gy.chunks_exact(ow).enumerate() {
        let start = base + r * row_step;
        if g.stride_w == 1 {
            for (o, &gv) in gx[start..start + ow].iter_mut().zip(row) {
                *o += w * gv;
            }
        } else {
            for (col, &gv) in row.iter().enumerate() {
                gx[start + col * g.stride_w] += w * gv;
            }
        }
    }
}

/// Dense direct convolution with a cache-friendly loop order.
///
/// Works on the materialized padded input, computes [`CHANNEL_BLOCK`] output
/// channels per pass so each input plane is reused from cache, and walks
/// output rows contiguously. Parallel over (sample, channel block) on the
/// current rayon pool. Per output value the accumulation order over
/// (c, kh, kw) matches [`dense_conv_reference`].
pub fn dense_conv_fast<T: Scalar>(
    input: &DenseTensor4<T>,
    weights: &DenseTensor4<T>,
    g: &ConvGeometry,
) -> Result<DenseTensor4<T>> {
    check_weights(weights, g)?;
    let padded = zero_pad(input, g)?;
    let n = input.shape().n;
    let precision = input.precision().combine(weights.precision());
    let os = g.output_shape(n);
    let plane_out = os.h * os.w;
    let (ph, pw) = (g.padded_h(), g.padded_w());
    let sample_in = g.padded_sample_size();
    let w = weights.data();
    let taps = g.taps();

    let mut out = vec![T::zero(); os.len()];
    if out.is_empty() {
        return DenseTensor4::new(os, out, precision);
    }
    out.par_chunks_mut(g.out_channels * plane_out)
        .enumerate()
        .for_each(|(b, sample_out)| {
            let x = &padded.data()[b * sample_in..(b + 1) * sample_in];
            sample_out
                .par_chunks_mut(CHANNEL_BLOCK * plane_out)
                .enumerate()
                .for_each(|(blk, chunk)| {
                    let d0 = blk * CHANNEL_BLOCK;
                    let width = chunk.len() / plane_out;
                    for c in 0..g.in_channels {
                        for kh in 0..g.filter_h {
                            for kw in 0..g.filter_w {
                                let tap = (c * g.filter_h + kh) * g.filter_w + kw;
                                let base = (c * ph + kh) * pw + kw;
                                for k in 0..width {
                                    let wk = w[(d0 + k) * taps + tap];
                                    axpy_plane(&mut chunk[k * plane_out..(k + 1) * plane_out], wk, x, base, g);
                                }
                            }
                        }
                    }
                });
        });
    DenseTensor4::new(os, out, precision)
}
