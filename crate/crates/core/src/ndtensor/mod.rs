//! Dense tensors with reverse-mode automatic differentiation.

mod gradcheck;
mod graph;
mod scalar;
mod tensor;

pub use gradcheck::{
    autodiff_gradients, finite_difference_gradients, grad_check, grad_check_vs_f64, TapeFn,
    GRAD_CHECK_EPS,
};
pub use graph::{Gradients, Graph, Var};
pub use scalar::{Precision, Scalar};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
