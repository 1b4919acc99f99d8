//! Lipschitz-bounded multiscale deep equilibrium engine.
//!
//! Every layer operation carries an analytic Lipschitz bound, so the
//! contraction constant of the whole fixed-point map `f_θ` is available in
//! closed form. When that constant is below one, both the forward equilibrium
//! solve and the implicit backward solve are guaranteed to converge.
//!
//! Modules, bottom-up:
//!
//! - [`tensors`]: dense arrays and the multiscale product-space state.
//! - [`lipops`]: layer kernels with forward, VJP and Lipschitz bound.
//! - [`budget`]: closed-form composition of the per-op bounds.
//! - [`solvers`]: Banach and Anderson fixed-point iteration.
//! - [`equilibrium`]: forward solve, implicit / JFB backward, Jacobian norms.
//! - [`model`]: the multiscale network `f_θ`, its head and projection pass.

pub mod budget;
pub mod equilibrium;
mod error;
pub mod lipops;
pub mod model;
pub mod numfmt;
pub mod solvers;
pub mod tensors;

pub use error::{Error, Result};
pub use tensors::{MultiscaleState, Real, Reduction, Tensor};

/// Train or eval behaviour for stochastic layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    #[default]
    Train,
    Eval,
}
