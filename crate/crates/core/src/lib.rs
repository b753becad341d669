//! Model compression and sparse inference at desk scale.
//!
//! The crate covers the whole compression pipeline: evolutionary pruning with
//! rewinding ([`pruning`]), linear fixed-point and KMeans codebook
//! quantisation ([`quant`]), a uniform-nnz CSR weight format ([`sparse`]) with
//! a direct sparse convolution engine, and a small from-scratch training
//! stack ([`trainer`]) to drive it all. [`pipeline`] glues the stages together
//! behind the `unsparse` command line.
//!
//! Numeric code is generic over [`Scalar`] (f32 or f64); the aliases below fix
//! the element type to f32, which is what the pipeline uses.

pub mod error;
pub mod pipeline;
pub mod pruning;
pub mod quant;
pub mod scalar;
pub mod sparse;
pub mod tensor;
pub mod timing;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{ConvGeometry, DenseTensor4, PrecisionMode, Shape4};

pub type Tensor4 = DenseTensor4<f32>;
pub type Csr = sparse::CsrFilter<f32>;
pub type Model32 = trainer::Model<f32>;
