//! Small MLP and CNN models with pluggable normalization, optimizers and the
//! training loop used to compare normalization layers.

pub mod data;
mod gemm;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod norm_layer;
pub mod optim;
pub mod train;

pub use data::Dataset;
pub use metrics::{Confusion, MetricLog, MetricRow, Metrics};
pub use model::{build_model, ForwardCache, InputShape, LayerSpec, Model, ModelSpec};
pub use norm_layer::{Mode, NormKind, NormLayer, NormSpec};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind, Schedule};
pub use train::{evaluate, train, train_observed, TrainConfig};
