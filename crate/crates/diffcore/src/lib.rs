//! Reverse-mode automatic differentiation over dense row-major tensors.
//!
//! A [`Graph`] is a dynamic tape: every forward op appends a node that keeps
//! its output value and enough saved state to run the vector-Jacobian
//! product later. Graphs are cheap to build and are rebuilt for every forward
//! pass. All ops are generic over [`Real`] so the same model code runs in
//! `f32` for training and in `f64` for finite-difference checks.

mod check;
mod error;
mod graph;
mod optim;
mod tensor;

pub use check::{grad_check, grad_check_floor, GradCheckReport};
pub use error::{Error, Result};
pub use graph::{Graph, NormKind, Upsample, Var};
pub use optim::{adam_step, Adam, AdamConfig, AdamState};
pub use tensor::{Real, Tensor};
