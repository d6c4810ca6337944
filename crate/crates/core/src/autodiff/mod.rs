//! Reverse-mode differentiation over dense N×C×H×W tensors.
//!
//! A [`Graph`] is an append-only tape: every op evaluates eagerly and records
//! its inputs, so creation order is a topological order and
//! [`Graph::backward`] walks it once in reverse.

mod adam;
mod gradcheck;
mod graph;
mod kernels;
mod params;
mod tensor;

pub use adam::{adam_step, AdamState, LrSchedule};
pub use gradcheck::{grad_check, grad_check_shapes, GradCheckOptions, GradCheckReport};
pub use graph::{sigmoid, softplus, Graph, Pad, Var};
pub use params::{Param, ParamStore};
pub use tensor::{Shape, Tensor};
