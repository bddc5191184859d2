//! Context normalization layers and the baselines they are compared with.
//!
//! Every layer has a hand-written forward and backward pass over `[N, C, L]`
//! activations (`L` is the flattened spatial extent). Gradients are checked
//! against central differences in [`gradcheck`].

pub mod checkpoint;
pub mod context;
pub mod contexts;
pub mod error;
pub mod gmm;
pub mod gradcheck;
pub mod norm;
pub mod rng;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use contexts::{assign_contexts, ContextAssignment, ContextSource, Strategy};
pub use error::{Error, Result};
pub use gmm::GmmParams;
pub use rng::Rng;
pub use tensor::{Fill, Tensor};
