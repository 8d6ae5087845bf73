//! Minimal CPU neural-network substrate: tensors, a differentiable tape that
//! supports gradients of gradients, equalized-learning-rate layers and Adam.

pub mod element;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tensor;

pub use element::Element;
pub use graph::{Graph, Var};
pub use optim::{Adam, AdamConfig};
pub use params::{Bound, Param, ParamId, ParamStore, Snapshot};
pub use tensor::Tensor;
