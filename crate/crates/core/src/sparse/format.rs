//! Modified CSR for convolution filters.
//!
//! Rows are output channels. Column indices are not tap coordinates but
//! precomputed flattened offsets into a zero-padded input sample, so the
//! engine adds a per-pixel base address and never decodes taps or checks
//! borders. Every row holds the same number of entries `n_nz`; rows with
//! fewer genuine non-zeros are filled with explicit zero-weight entries. An
//! all-zero filter keeps one padded entry per row.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::io_helpers::{read_u32, read_values, write_u32, write_values};
use crate::tensor::{ConvGeometry, DenseTensor4, PrecisionMode};

/// Offset used by explicit padding entries (always a valid tap).
pub const PAD_OFFSET: u32 = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct CsrFilter<T> {
    geometry: ConvGeometry,
    row_ptr: Vec<u32>,
    offsets: Vec<u32>,
    weights: Vec<T>,
    n_nz: usize,
    precision: PrecisionMode,
}

impl<T: Scalar> CsrFilter<T> {
    /// Assembles a filter from raw arrays and checks every invariant.
    pub fn from_parts(
        geometry: ConvGeometry,
        row_ptr: Vec<u32>,
        offsets: Vec<u32>,
        weights: Vec<T>,
        precision: PrecisionMode,
    ) -> Result<Self> {
        let n_nz = match row_ptr.get(1) {
            Some(&v) => v as usize,
            None => return Err(Error::Corrupt("row_ptr shorter than 2".into())),
        };
        let f = CsrFilter {
            geometry,
            row_ptr,
            offsets,
            weights,
            n_nz,
            precision,
        };
        f.validate()?;
        Ok(f)
    }

    pub fn geometry(&self) -> &ConvGeometry {
        &self.geometry
    }

    pub fn row_ptr(&self) -> &[u32] {
        &self.row_ptr
    }

    pub fn offsets(&self) -> &[u32] {
        &self.offsets
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    /// Entries per output channel.
    pub fn n_nz(&self) -> usize {
        self.n_nz
    }

    pub fn precision(&self) -> PrecisionMode {
        self.precision
    }

    /// `(weights, offsets)` of output channel `d`.
    #[inline]
    pub fn channel(&self, d: usize) -> (&[T], &[u32]) {
        let start = self.row_ptr[d] as usize;
        let end = self.row_ptr[d + 1] as usize;
        (&self.weights[start..end], &self.offsets[start..end])
    }

    /// Entries that carry a non-zero weight.
    pub fn genuine_nonzeros(&self) -> usize {
        self.weights.iter().filter(|w| !w.is_zero()).count()
    }

    /// Checks row-pointer uniformity, array lengths and offset validity.
    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        let d = self.geometry.out_channels;
        if self.row_ptr.len() != d + 1 {
            return Err(Error::Corrupt(format!(
                "row_ptr has {} entries, expected {}",
                self.row_ptr.len(),
                d + 1
            )));
        }
        if self.row_ptr[0] != 0 {
            return Err(Error::Corrupt("row_ptr[0] must be 0".into()));
        }
        if self.n_nz == 0 {
            return Err(Error::Corrupt("n_nz must be at least 1".into()));
        }
        for (j, pair) in self.row_ptr.windows(2).enumerate() {
            if pair[1].checked_sub(pair[0]) != Some(self.n_nz as u32) {
                return Err(Error::Corrupt(format!(
                    "channel {j} holds {} entries, expected {}",
                    pair[1] as i64 - pair[0] as i64,
                    self.n_nz
                )));
            }
        }
        let total = d * self.n_nz;
        if self.offsets.len() != total || self.weights.len() != total {
            return Err(Error::Corrupt(format!(
                "expected {total} offsets and weights, got {} and {}",
                self.offsets.len(),
                self.weights.len()
            )));
        }
        let x_size = self.geometry.padded_sample_size();
        for (i, &off) in self.offsets.iter().enumerate() {
            if off as usize >= x_size || self.geometry.decode_offset(off as usize).is_none() {
                return Err(Error::Corrupt(format!(
                    "entry {i}: offset {off} is not a filter tap"
                )));
            }
        }
        Ok(())
    }
}

/// Compresses dense `D×C×H_f×W_f` weights.
///
/// `n_nz` is the largest per-channel non-zero count (at least 1). Padding
/// entries use [`PAD_OFFSET`] and come first in their row so offsets stay
/// non-decreasing within each channel.
pub fn build_csr<T: Scalar>(dense: &DenseTensor4<T>, geometry: &ConvGeometry) -> Result<CsrFilter<T>> {
    geometry.validate()?;
    if dense.shape() != geometry.weight_shape() {
        return Err(shape_err!(
            "weights {} do not match geometry {}",
            dense.shape(),
            geometry.weight_shape()
        ));
    }
    let taps = geometry.taps();
    let rows: Vec<Vec<(u32, T)>> = dense
        .data()
        .chunks(taps)
        .map(|row| {
            row.iter()
                .enumerate()
                .filter(|(_, w)| !w.is_zero())
                .map(|(t, &w)| {
                    let kw = t % geometry.filter_w;
                    let kh = (t / geometry.filter_w) % geometry.filter_h;
                    let c = t / (geometry.filter_w * geometry.filter_h);
                    (geometry.tap_offset(c, kh, kw) as u32, w)
                })
                .collect()
        })
        .collect();
    let n_nz = rows.iter().map(Vec::len).max().unwrap_or(0).max(1);
    let d = geometry.out_channels;
    let mut row_ptr = Vec::with_capacity(d + 1);
    let mut offsets = Vec::with_capacity(d * n_nz);
    let mut weights = Vec::with_capacity(d * n_nz);
    row_ptr.push(0u32);
    for row in rows {
        for _ in row.len()..n_nz {
            offsets.push(PAD_OFFSET);
            weights.push(T::zero());
        }
        for (off, w) in row {
            offsets.push(off);
            weights.push(w);
        }
        row_ptr.push(offsets.len() as u32);
    }
    Ok(CsrFilter {
        geometry: *geometry,
        row_ptr,
        offsets,
        weights,
        n_nz,
        precision: dense.precision(),
    })
}

/// Expands a filter back to dense weights.
pub fn csr_to_dense<T: Scalar>(filter: &CsrFilter<T>) -> Result<DenseTensor4<T>> {
    let g = filter.geometry;
    let taps = g.taps();
    let mut data = vec![T::zero(); g.out_channels * taps];
    for d in 0..g.out_channels {
        let (ws, offs) = filter.channel(d);
        for (&w, &off) in ws.iter().zip(offs) {
            let (c, kh, kw) = g.decode_offset(off as usize).ok_or_else(|| {
                Error::Corrupt(format!("channel {d}: offset {off} is not a filter tap"))
            })?;
            if w.is_zero() {
                continue;
            }
            let slot = &mut data[d * taps + (c * g.filter_h + kh) * g.filter_w + kw];
            if !slot.is_zero() {
                return Err(Error::Corrupt(format!(
                    "channel {d}: tap ({c},{kh},{kw}) stored twice"
                )));
            }
            *slot = w;
        }
    }
    DenseTensor4::new(g.weight_shape(), data, filter.precision)
}

/// Fraction of zero weights; padding entries count as zeros.
pub fn effective_sparsity<T: Scalar>(filter: &CsrFilter<T>) -> f64 {
    let total = filter.geometry.out_channels * filter.geometry.taps();
    1.0 - filter.genuine_nonzeros() as f64 / total as f64
}

/// JSON sidecar written next to an exported filter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsrSidecar {
    pub n_nz: usize,
    pub sparsity: f64,
    pub out_channels: usize,
    pub precision: PrecisionMode,
    pub geometry: ConvGeometry,
    /// SHA-256 of the binary export, lowercase hex.
    pub checksum: String,
}

const GEOMETRY_WORDS: usize = 10;

fn geometry_words(g: &ConvGeometry) -> [usize; GEOMETRY_WORDS] {
    [
        g.in_channels,
        g.out_channels,
        g.filter_h,
        g.filter_w,
        g.stride_h,
        g.stride_w,
        g.pad_h,
        g.pad_w,
        g.in_h,
        g.in_w,
    ]
}

/// Binary export: ten u32 geometry words (C, D, H_f, W_f, s_h, s_w,
/// pad_h, pad_w, X_h, X_w), a u8 precision tag, then row_ptr (D+1 × u32),
/// offsets (D·n_nz × u32) and weights in the filter's precision.
pub fn write_csr<W: Write, T: Scalar>(w: &mut W, filter: &CsrFilter<T>) -> Result<()> {
    for v in geometry_words(&filter.geometry) {
        write_u32(w, v as u32)?;
    }
    w.write_all(&[filter.precision.tag()])?;
    for &v in filter.row_ptr.iter().chain(&filter.offsets) {
        write_u32(w, v)?;
    }
    write_values(w, &filter.weights, filter.precision)
}

pub fn read_csr<R: Read, T: Scalar>(r: &mut R) -> Result<CsrFilter<T>> {
    let mut words = [0usize; GEOMETRY_WORDS];
    for v in words.iter_mut() {
        *v = read_u32(r)? as usize;
    }
    let geometry = ConvGeometry {
        in_channels: words[0],
        out_channels: words[1],
        filter_h: words[2],
        filter_w: words[3],
        stride_h: words[4],
        stride_w: words[5],
        pad_h: words[6],
        pad_w: words[7],
        in_h: words[8],
        in_w: words[9],
    };
    geometry.validate()?;
    let mut tag = [0u8; 1];
    r.read_exact(&mut tag)?;
    let precision = PrecisionMode::from_tag(tag[0])?;
    let row_ptr = (0..=geometry.out_channels)
        .map(|_| read_u32(r))
        .collect::<Result<Vec<_>>>()?;
    let total = *row_ptr.last().unwrap_or(&0) as usize;
    let offsets = (0..total).map(|_| read_u32(r)).collect::<Result<Vec<_>>>()?;
    let weights = read_values(r, total, precision)?;
    CsrFilter::from_parts(geometry, row_ptr, offsets, weights, precision)
}

/// Serializes `filter` and returns the bytes together with its sidecar.
pub fn export_csr<T: Scalar>(filter: &CsrFilter<T>) -> Result<(Vec<u8>, CsrSidecar)> {
    let mut bytes = Vec::new();
    write_csr(&mut bytes, filter)?;
    let checksum = hex(&Sha256::digest(&bytes));
    let sidecar = CsrSidecar {
        n_nz: filter.n_nz,
        sparsity: effective_sparsity(filter),
        out_channels: filter.geometry.out_channels,
        precision: filter.precision,
        geometry: filter.geometry,
        checksum,
    };
    Ok((bytes, sidecar))
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
