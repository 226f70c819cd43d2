//! Minimal reverse-mode automatic differentiation over rank-4 tensors.
//!
//! Graphs are built once ([`Graph`]), then evaluated with
//! [`Graph::forward`] and differentiated with [`Graph::backward`].
//! Trainable tensors and normalization statistics live in a
//! [`ParamStore`] referenced by name, so one store can be shared by graphs
//! built for different batch sizes.

mod graph;
mod kernels;
pub mod nn;
mod optim;
mod params;
mod tensor;

pub use graph::{Axis, ForwardOptions, Gradients, Graph, Mode, NodeId, OpKind, OpNode, Unary};
pub use optim::{Adam, AdamConfig, OPTIMIZER_MAGIC};
pub use params::{decode_checkpoint, ParamKind, ParamStore, CHECKPOINT_MAGIC};
pub use tensor::Tensor;
