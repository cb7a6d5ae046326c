//! Riemannian stochastic compositional gradient descent.
//!
//! Minimizes nested expectations `F(x) = E_ξ[f_ξ(E_φ[g_φ(x)])]` (and their
//! multi-level generalization) over Riemannian manifolds by tracking the inner
//! expectation with a first-order corrected moving average.

pub mod composition;
pub mod error;
pub mod fixtures;
pub mod manifold;
pub mod matfun;
pub mod policy_eval;
pub mod rng;
pub mod solver;
pub mod verify;

pub use error::{Error, Result};
pub use manifold::{Manifold, ManifoldKind, Point, Tangent};
