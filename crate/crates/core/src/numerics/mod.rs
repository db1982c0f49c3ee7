//! Dense tensors, reverse-mode differentiation and the AdamW optimizer.

mod gradcheck;
mod graph;
mod optim;
mod params;
mod tensor;

pub use gradcheck::{finite_difference_gradient, max_relative_error, relative_error_norm};
pub use graph::{gelu, gelu_derivative, Gradients, Graph, Var};
pub use optim::{AdamWConfig, OptimizerState};
pub use params::{ParamEntry, ParamGroup, ParamId, ParamStore, Session};
pub use tensor::{Real, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum NumericsError {
    #[error("dimension error: {0}")]
    Shape(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("training fault: {0}")]
    TrainingFault(String),
}
