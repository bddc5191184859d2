//! Experiment front end: dataset loaders, context construction and the
//! normalization comparison runner behind the `ctxnorm` binary.

pub mod config;
pub mod csv_data;
pub mod error;
pub mod experiment;
pub mod idx;
pub mod synthetic;

pub use config::{ContextConfig, DatasetConfig, ExperimentConfig, ModelName, Overrides};
pub use error::{CliError, Result};
pub use experiment::{
    emit_summary_table, format_table, read_curves, read_summary, run_experiment, run_experiment_with, MethodResult,
    Summary,
};
pub use idx::load_mnist_idx;
pub use synthetic::gen_synthetic_gmm;
