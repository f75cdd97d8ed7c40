//! Inertial manifolds of dissipative ODEs via time-dependent Householder
//! decoupling and finite-horizon boundary value problems.

pub mod error;
pub mod householder;
pub mod linalg;
pub mod manifold;
pub mod ode_bvp;
pub mod ode_ivp;
pub mod problems;

pub use error::{Error, Result};
