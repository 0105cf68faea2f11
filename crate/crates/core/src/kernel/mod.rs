//! Minimal differentiable kernel: the forward primitives the matching
//! network needs, a recording tape with reverse-mode gradients, AdamW, and
//! finite-difference gradient checking.

pub mod adamw;
pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod ops;
pub mod tensor;

pub use adamw::{AdamWConfig, AdamWState};
pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Gradients, Graph, NodeId, OpKind};
pub use ops::{Activation, Mode};
pub use tensor::{Real, Tensor};
