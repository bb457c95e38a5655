//! Numerical verification of the first and second regularized trace
//! formulas for L = (−1)^r d^{2r}/dx^{2r} + A + Q(x) on [0, π] with
//! matrix-valued potentials, through exact finite Galerkin truncations.

pub mod error;
pub mod linalg;
pub mod quadrature;

pub mod model;
pub mod galerkin;
pub mod eigen;
pub mod resolvent;
pub mod traces;
pub mod fourier;
pub mod shift;
pub mod cli;

pub use error::{Error, Result};
