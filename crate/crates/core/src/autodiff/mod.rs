//! Minimal reverse-mode automatic differentiation.

pub mod gradcheck;
mod optim;
mod registry;
mod tensor;

pub use optim::{clip_grad_norm, Adam};
pub use registry::{Group, Parameter, ParameterRegistry};
pub use tensor::{no_grad, Op, Tensor};
