//! Minimal differentiable substrate: tensors, a recording tape with the
//! primitive set the codec needs, parameter storage, Adam, and a
//! finite-difference checker.

mod gradcheck;
mod graph;
mod optim;
mod params;
mod real;
mod tensor;

pub use gradcheck::{all_entries, grad_check, GradCheckReport};
pub use graph::{Gradients, Graph, Var, LAYER_NORM_EPS};
pub use optim::{step_lr, Adam, GradBuffer};
pub use params::{ParamId, ParameterStore, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub(crate) use params::ByteCursor;
pub use real::{normal_cdf, normal_pdf, sigmoid, softplus, Real};
pub use tensor::Tensor;
