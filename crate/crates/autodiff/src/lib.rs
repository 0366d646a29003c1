//! Minimal dense reverse-mode automatic differentiation.
//!
//! The engine supports exactly the operators a small convolutional encoder,
//! channel-attention fusion and distance-based contrastive losses need.
//! Everything is `f64`, single-sample (no batch axis) and deterministic.

mod error;
mod gradcheck;
mod graph;
mod init;
mod kernels;
mod optim;
mod params;
mod tensor;

pub use error::{AutodiffError, Result};
pub use gradcheck::{grad_check, operator_suite, GradCheck};
pub use graph::{Gradients, Graph, Var};
pub use init::{he_normal, normal};
pub use optim::Sgd;
pub use params::ParamSet;
pub use tensor::Tensor;
