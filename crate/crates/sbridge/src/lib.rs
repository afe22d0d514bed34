//! Schrödinger bridge generative models trained by likelihood objectives
//! derived from forward-backward SDEs.
//!
//! The crate is organized around a small reverse-mode autodiff tape
//! ([`autodiff`]), residual policy networks ([`nets`]), SDE/ODE integrators
//! ([`sde`]), the divergence-based likelihood losses ([`objectives`]),
//! joint/alternate training loops ([`training`]), a predictor-corrector
//! sampler ([`sampling`]), likelihood and sample-quality diagnostics
//! ([`eval`]), and 2D toy targets ([`data`]).

pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod nets;
pub mod objectives;
pub mod rng;
pub mod sampling;
pub mod sde;
pub mod training;

pub use error::{Error, Result};
