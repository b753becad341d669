//! Uniform-nnz CSR filters and the direct sparse convolution engine.

mod engine;
mod format;
mod tune;

pub use engine::{
    plan_blocks, sparse_conv_1d, sparse_conv_forward, worker_pool, ExecConfig, VirtualBlock,
};
pub use format::{
    build_csr, csr_to_dense, effective_sparsity, export_csr, read_csr, write_csr, CsrFilter,
    CsrSidecar, PAD_OFFSET,
};
pub(crate) use format::hex;
pub use tune::{autotune_sb, AutotuneResult, SB_CANDIDATES};
