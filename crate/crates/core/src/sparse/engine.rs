//! Direct sparse convolution.
//!
//! The output is split into virtual blocks, one per (output channel, group
//! of `sub_batch` samples), mirroring one GPU thread block per output
//! channel and sample group. A block loads its channel's `(θ, Λ)` slice once
//! and reuses every `(w, λ)` pair across all samples of its group. Blocks
//! run on a work-stealing pool; each owns a disjoint slice of the output and
//! accumulates in ascending offset order, so results do not depend on the
//! worker count or on `sub_batch`.

use std::collections::HashMap;
use std::ops::Range;
use std::sync::{Arc, Mutex, OnceLock};

use rayon::prelude::*;
use rayon::ThreadPool;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{axpy_plane, zero_pad, ConvGeometry, DenseTensor4};

use super::CsrFilter;

/// Execution parameters of the sparse engine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecConfig {
    /// Samples handled by one virtual block (sb_S).
    pub sub_batch: usize,
    /// Pool size; 0 means one worker per available core.
    pub worker_count: usize,
}

impl Default for ExecConfig {
    fn default() -> Self {
        ExecConfig {
            sub_batch: 1,
            worker_count: 0,
        }
    }
}

impl ExecConfig {
    pub fn new(sub_batch: usize, worker_count: usize) -> Self {
        ExecConfig {
            sub_batch,
            worker_count,
        }
    }

    pub fn validate(&self, batch: usize) -> Result<()> {
        if self.sub_batch == 0 || batch % self.sub_batch != 0 {
            return Err(invalid!(
                "sub-batch {} does not divide batch {batch}",
                self.sub_batch
            ));
        }
        Ok(())
    }

    /// N_B = b_S·D / sb_S.
    pub fn block_count(&self, batch: usize, out_channels: usize) -> usize {
        batch * out_channels / self.sub_batch
    }
}

/// One unit of scheduled work: an output channel over a sample range.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VirtualBlock {
    pub out_channel: usize,
    pub samples: Range<usize>,
}

/// Partitions the output into `b_S·D/sb_S` blocks, channel-fastest.
pub fn plan_blocks(geometry: &ConvGeometry, batch: usize, sub_batch: usize) -> Result<Vec<VirtualBlock>> {
    ExecConfig::new(sub_batch, 1).validate(batch)?;
    let groups = batch / sub_batch;
    let mut blocks = Vec::with_capacity(groups * geometry.out_channels);
    for g in 0..groups {
        for d in 0..geometry.out_channels {
            blocks.push(VirtualBlock {
                out_channel: d,
                samples: g * sub_batch..(g + 1) * sub_batch,
            });
        }
    }
    Ok(blocks)
}

/// Shared rayon pool with `workers` threads (0 = all cores).
pub fn worker_pool(workers: usize) -> Arc<ThreadPool> {
    static POOLS: OnceLock<Mutex<HashMap<usize, Arc<ThreadPool>>>> = OnceLock::new();
    let workers = if workers == 0 {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    } else {
        workers
    };
    let mut pools = POOLS.get_or_init(Default::default).lock().expect("pool registry poisoned");
    pools
        .entry(workers)
        .or_insert_with(|| {
            Arc::new(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(workers)
                    .thread_name(move |i| format!("unsparse-{workers}-{i}"))
                    .build()
                    .expect("failed to build worker pool"),
            )
        })
        .clone()
}

/// Computes one block into `acc` (`sub_batch` output planes).
fn run_block<T: Scalar>(
    block: &VirtualBlock,
    filter: &CsrFilter<T>,
    padded: &[T],
    acc: &mut [T],
) {
    let g = filter.geometry();
    let plane = g.out_h() * g.out_w();
    let x_size = g.padded_sample_size();
    let (ws, offs) = filter.channel(block.out_channel);
    for (&w, &lambda) in ws.iter().zip(offs) {
        for (t, sample) in block.samples.clone().enumerate() {
            let x = &padded[sample * x_size..(sample + 1) * x_size];
            // base address t_in_p = r·s_h·(X_w + 2·pad_w) + c·s_w, shifted by λ
            axpy_plane(&mut acc[t * plane..(t + 1) * plane], w, x, lambda as usize, g);
        }
    }
}

/// Sparse convolution of `input` with `filter`.
pub fn sparse_conv_forward<T: Scalar>(
    input: &DenseTensor4<T>,
    filter: &CsrFilter<T>,
    config: &ExecConfig,
) -> Result<DenseTensor4<T>> {
    let g = filter.geometry();
    let batch = input.shape().n;
    config.validate(batch)?;
    let padded = zero_pad(input, g)?;
    let precision = input.precision().combine(filter.precision());
    let os = g.output_shape(batch);
    let plane = g.out_h() * g.out_w();
    let blocks = plan_blocks(g, batch, config.sub_batch)?;

    let results: Vec<Vec<T>> = worker_pool(config.worker_count).install(|| {
        blocks
            .par_iter()
            .map(|b| {
                let mut acc = vec![T::zero(); config.sub_batch * plane];
                run_block(b, filter, padded.data(), &mut acc);
                acc
            })
            .collect()
    });

    let mut out = vec![T::zero(); os.len()];
    for (block, acc) in blocks.iter().zip(results) {
        for (t, sample) in block.samples.clone().enumerate() {
            let dst = os.flatten(sample, block.out_channel, 0, 0);
            for (o, &v) in out[dst..dst + plane].iter_mut().zip(&acc[t * plane..(t + 1) * plane]) {
                *o = precision.store(v);
            }
        }
    }
    DenseTensor4::new(os, out, precision)
}

/// Sparse convolution over a degenerate (one-dimensional) geometry.
///
/// Same kernel as [`sparse_conv_forward`]; tracked separately because
/// one-dimensional layers profit from sparsity at lower levels.
pub fn sparse_conv_1d<T: Scalar>(
    input: &DenseTensor4<T>,
    filter: &CsrFilter<T>,
    config: &ExecConfig,
) -> Result<DenseTensor4<T>> {
    if !filter.geometry().is_one_dimensional() {
        return Err(Error::Geometry(format!(
            "{} is not a one-dimensional convolution",
            filter.geometry().label()
        )));
    }
    let s = input.shape();
    if s.h != 1 && s.w != 1 {
        return Err(shape_err!("1-D input must have h = 1 or w = 1, got {s}"));
    }
    sparse_conv_forward(input, filter, config)
}
