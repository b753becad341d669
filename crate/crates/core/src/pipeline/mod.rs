//! The command-line stages: prune, quantize, bench, configure, verify.

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod configure;
pub mod prune;
pub mod quantize;
pub mod verify;

pub use bench::{run_bench, BenchConfig, BenchReport, BenchRow};
pub use checkpoint::{load_selected, load_state, Manifest};
pub use config::{derive_seed, Overrides, PipelineConfig};
pub use configure::{configure, Backend, BackendConfig};
pub use prune::run_prune;
pub use quantize::{run_quantize, QuantRow};
pub use verify::{run_verify, VerifyOptions, VerifyReport};
