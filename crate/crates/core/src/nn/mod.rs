//! Dense `f64` tensors, a reverse-mode tape, SVD and a finite-difference
//! gradient oracle.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod params;
pub mod svd;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use params::{BoundParams, ParamSet};
pub use svd::{svd, Svd};
pub use tensor::Tensor;
