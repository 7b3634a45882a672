//! Minimal reverse-mode differentiation over 2-D `f64` arrays, with exactly
//! the operators the extractor network needs.

mod adam;
pub mod gradcheck;
mod tape;
mod tensor;

pub use adam::AdamState;
pub use tape::{Gradients, Graph, NormKind, Var, NORM_EPS};
pub use tensor::Tensor;

pub(crate) use tape::zero_mean;
pub(crate) use tensor::gemm;
