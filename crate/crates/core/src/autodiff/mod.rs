//! Reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] records every primitive in creation order; [`Graph::backward`]
//! walks that order in reverse so each node is visited once, after all of its
//! consumers. Finite-difference checking lives in [`gradcheck`].

mod graph;
pub mod gradcheck;

pub use graph::{Gradients, Graph, Var};
pub use gradcheck::{grad_check, grad_check_params, GradCheckReport};
