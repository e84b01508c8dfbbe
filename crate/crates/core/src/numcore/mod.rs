//! Numeric substrate: tensors, reverse-mode autodiff, layers, ADAM and
//! distribution primitives.

pub mod adam;
pub mod dist;
pub mod graph;
pub mod nn;
pub mod pwl;
pub mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use dist::DiagGaussian;
pub use graph::{Gradients, Graph, ParamId, ParamStore, Var};
pub use nn::{Activation, Mlp};
pub use tensor::Tensor;
