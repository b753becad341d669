//! Small CNNs trained from scratch: layers, backpropagation, SGD,
//! datasets and metrics.

mod data;
mod metrics;
mod model;
mod train;

pub use data::{
    make_datasets, read_image_file, write_image_file, Dataset, DatasetConfig, DatasetSource, Split,
    SplitKind, Task,
};
pub use metrics::{anomaly_threshold, evaluate, top1, Confusion, EvalReport};
pub use model::{
    Grads, Head, InferenceOptions, Init, Layer, LayerSpec, Model, ModelSpec, ParamGrad, GRAD_CHUNK,
};
pub use train::{train, train_epoch, EpochSummary, Sgd, TrainingConfig};
