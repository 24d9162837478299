//! Dense tensors, linear algebra, reverse-mode differentiation and optimizers.

pub mod fd;
pub mod graph;
pub mod kernels;
pub mod linalg;
pub mod nn;
pub mod optim;
pub mod special;
pub mod tensor;

pub use fd::{finite_difference_gradient, max_relative_error};
pub use graph::{CustomOp, Gradients, Graph, Var};
pub use linalg::cholesky;
pub use nn::{BatchStats, BnMode};
pub use optim::{Optimizer, OptimizerKind};
pub use special::{log_sum_exp, softplus, softplus_inverse};
pub use tensor::Tensor;
