//! Spectral Galerkin simulation of a stochastic reaction-diffusion equation
//! with exponentially fading memory on the unit interval.
//!
//! The state is the pair `(u, eta)` of the field and its integrated past
//! history; the memory term is carried by `eta` on a truncated memory-age
//! grid, which restores the Markov property.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod history;
pub mod integrator;
pub mod kernel;
pub mod lyapunov;
pub mod measure;
pub mod model;
pub mod oracles;
pub mod spectral;

pub use error::{Error, Result};
