//! Differentiable computation: tensors, a reverse-mode tape, stochastic
//! sampling primitives, transformer blocks and gradient verification.

pub mod attention;
pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod gumbel;
pub mod optim;
pub mod params;
pub mod tensor;

pub use attention::{attention_block, attention_block_keys, BlockOutput, KeyMask, BlockParams, Linear, Norm};
pub use checkpoint::Checkpoint;
pub use gradcheck::{grad_check, grad_check_subset, GradEntry, GradReport};
pub use graph::{sigmoid, Gradients, Graph, NodeId};
pub use gumbel::{gumbel_softmax, gumbel_softmax_node, sample_gumbel, NoiseKey};
pub use optim::{clip_global_norm, Adam};
pub use params::{Init, InitMeta, ParamId, ParamStore};
pub use tensor::Tensor;
