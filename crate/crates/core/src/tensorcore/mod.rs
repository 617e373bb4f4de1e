//! Dense 64-bit tensors, reverse-mode autodiff, transformer blocks and the
//! optimizer used by every trainable model in the crate.

pub mod checkpoint;
pub mod config;
pub mod gradcheck;
pub mod graph;
pub mod nn;
pub mod optim;
pub mod params;
pub mod tensor;

pub use config::{ModelConfig, TrainConfig};
pub use graph::{AttentionSpec, Graph, NodeId};
pub use optim::{clip_global_norm, AdamW, AdamWConfig, LinearWarmup};
pub use params::{Gradients, ParamBuilder, ParamId, ParamStore};
pub use tensor::Tensor;
