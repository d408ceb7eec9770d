//! Minimal reverse-mode differentiation over dense 2-D arrays.
//!
//! A [`Graph`] is built fresh for every forward pass. Trainable matrices live
//! in a [`ParamStore`] and are pulled into a graph by name; after
//! [`Graph::backward`] their gradients are pushed back with
//! [`Graph::accumulate_grads`] and consumed by [`ParamStore::step`].

mod gradcheck;
mod graph;
mod params;

pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{sigmoid, Graph, Var};
pub use params::{Optimizer, ParamStore};
