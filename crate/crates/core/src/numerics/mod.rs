//! Dense-tensor arithmetic, reverse-mode differentiation, and Adam —
//! just enough to train the toy LM and the compressor and to expose
//! attention gradients.

pub mod adam;
pub mod graph;
pub mod io;
pub mod ops;
pub mod scalar;
pub mod tensor;

pub use adam::{adam_step, adam_step_slices, AdamState};
pub use graph::{Gradients, Graph, NodeId};
pub use scalar::Scalar;
pub use tensor::Tensor;
