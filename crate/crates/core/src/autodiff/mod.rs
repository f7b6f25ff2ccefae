//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] is an append-only tape. Every primitive evaluates its forward
//! value immediately, records the node, and returns a [`Var`] handle. Because
//! nodes can only reference earlier nodes, the tape is already in topological
//! order and [`Graph::backward`] is a single reverse sweep.

mod checkpoint;
mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod params;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use gradcheck::{grad_check, rel_error, GradCheckEntry, GradCheckReport};
pub use graph::{Gradients, Graph, Padding, Var};
pub use params::ParamStore;
