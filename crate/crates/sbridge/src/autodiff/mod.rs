//! Reverse-mode automatic differentiation over batched expression graphs,
//! plus exact and stochastic divergence estimators.
//!
//! Values on the tape are `(rows, cols)` matrices: a batch of row vectors,
//! a parameter matrix, or a `(1,1)` scalar. The primitive set is exactly
//! what the policy networks and likelihood losses need; there is no
//! general broadcasting.

mod divergence;
mod tape;

pub use divergence::{
    LinearField,
    divergence_exact, divergence_exact_batch, divergence_hutchinson, DivergenceEstimate,
    DivergenceMethod, DivergenceMode, VectorField,
};
pub use tape::{sigmoid, swish, Gradients, NodeId, Tape};
