//! Reverse-mode automatic differentiation over dense tensors.

pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod network;

pub use gradcheck::{check_function, gradient_check, GradCheckReport};
pub use graph::{BatchStats, Gradients, Graph, Var};
pub use network::{ForwardPass, Layer, LayerSpec, Network};
