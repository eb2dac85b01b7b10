//! A deliberately small reverse-mode automatic differentiation engine.
//!
//! It provides exactly the dense kernels a miniature causal transformer and
//! its cache-management side networks need, each with a hand-written
//! backward rule, plus a central-difference gradient checker.

pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod scalar;
pub mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{gradcheck, GradcheckReport};
pub use graph::{softmax_row, AttentionSpec, Graph, Var, LAYERNORM_EPS};
pub use scalar::{lit, Scalar};
pub use tensor::Tensor;
