//! Little-endian tensor serialization.
//!
//! Layout: `n, c, h, w` as u32, one u8 precision tag (0 = binary32,
//! 1 = binary16), then `n·c·h·w` values as 4-byte binary32 or 2-byte
//! binary16.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::{from_binary16_bits, to_binary16_bits, DenseTensor4, PrecisionMode, Shape4};

pub(crate) fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn write_values<W: Write, T: Scalar>(
    w: &mut W,
    values: &[T],
    precision: PrecisionMode,
) -> Result<()> {
    let mut buf = Vec::with_capacity(values.len() * precision.width());
    match precision {
        PrecisionMode::Binary32 => {
            for v in values {
                buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            }
        }
        PrecisionMode::Binary16 => {
            for v in values {
                buf.extend_from_slice(&to_binary16_bits(v.as_f64()).to_le_bytes());
            }
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub(crate) fn read_values<R: Read, T: Scalar>(
    r: &mut R,
    count: usize,
    precision: PrecisionMode,
) -> Result<Vec<T>> {
    let mut buf = vec![0u8; count * precision.width()];
    r.read_exact(&mut buf)?;
    Ok(match precision {
        PrecisionMode::Binary32 => buf
            .chunks_exact(4)
            .map(|b| T::lit(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
            .collect(),
        PrecisionMode::Binary16 => buf
            .chunks_exact(2)
            .map(|b| T::lit(from_binary16_bits(u16::from_le_bytes([b[0], b[1]]))))
            .collect(),
    })
}

pub fn write_tensor<W: Write, T: Scalar>(w: &mut W, t: &DenseTensor4<T>) -> Result<()> {
    let s = t.shape();
    for d in [s.n, s.c, s.h, s.w] {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("dimension {d} exceeds u32")))?;
        write_u32(w, d)?;
    }
    w.write_all(&[t.precision().tag()])?;
    write_values(w, t.data(), t.precision())
}

pub fn read_tensor<R: Read, T: Scalar>(r: &mut R) -> Result<DenseTensor4<T>> {
    let mut dims = [0usize; 4];
    for d in dims.iter_mut() {
        *d = read_u32(r)? as usize;
    }
    let mut tag = [0u8; 1];
    r.read_exact(&mut tag)?;
    let precision = PrecisionMode::from_tag(tag[0])?;
    let shape = Shape4::new(dims[0], dims[1], dims[2], dims[3]);
    let data = read_values(r, shape.len(), precision)?;
    DenseTensor4::new(shape, data, precision)
}
