//! Dense kernels and a fully-connected ReLU/softmax MLP with closed-form
//! per-example gradient norms.

mod matrix;
mod mlp;

pub use matrix::{matmul, matmul_nt, matmul_tn, row_sq_norms, Matrix};
pub use mlp::{
    backward, forward, naive_per_example_norms, per_example_grad_sq_norms, Activation,
    BackwardResult, Dense, ForwardCache, LayerSpec, ModelParams,
};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NnError {
    #[error("dimension error: {0}")]
    Shape(String),
    #[error("non-finite values produced in {0}")]
    NonFinite(&'static str),
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
}
