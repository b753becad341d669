//! Linear fixed-point and KMeans codebook quantisation.

mod fixed;
mod kmeans;
mod model;

pub use fixed::{fit_fixed_point, linear_quantize, saturate_activations, FixedPointParams};
pub use kmeans::{kmeans_1d, kmeans_codebook, Codebook, KMeansInit, KMeansResult, MAX_ITERATIONS};
pub use model::{
    calibrate_activations, quantize_and_report, quantize_model, QuantMode, QuantReport, QuantizedModel,
    ACTIVATION_SATURATION, CODEBOOK_OMEGA, CODEBOOK_PSI,
};
