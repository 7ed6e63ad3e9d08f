//! Reverse- and forward-mode differentiation on a dynamic expression graph.
//!
//! The primitive set (affine products, elementwise maps, reductions,
//! concatenation) is closed under differentiation: `gradient`, `vjp`, and
//! `jvp` append ordinary nodes to the same graph instead of producing bare
//! numbers, so any derivative can be differentiated once more. That is the
//! mechanism behind exact score Jacobians and the second-order symmetry
//! penalty used in training.
//!
//! Evaluation is eager: each operation computes its value (64-bit floats) the
//! moment it is built, in creation order, which makes every pass over the
//! same inputs bit-identical. A graph is single-threaded; parallelism happens
//! across independent graphs.

mod deriv;
mod graph;
mod tensor;

pub use graph::{Graph, Var};
pub use tensor::{Shape, Tensor};
