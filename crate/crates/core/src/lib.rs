//! Numerical toolkit for stochastic control experiments.
//!
//! The crate bundles the computational pieces needed to study controlled
//! stochastic systems end to end:
//!
//! - [`stochastic`]: Brownian path simulation, Ito integrals and the
//!   discretized Ito formula, Euler-Maruyama schemes;
//! - [`controllability`]: Kalman and stochastic rank tests, Gramian-based
//!   steering, and classical counterexamples for norm-optimal control;
//! - [`bsde`]: backward SDE solvers (least-squares Monte Carlo and an exact
//!   change-of-measure solver for single-mode linear equations) plus the
//!   duality identity that links them to controlled forward equations;
//! - [`max_principle`]: spike variations, adjoint equations, and numerical
//!   checks of the pointwise maximum-principle inequality against dynamic
//!   programming oracles;
//! - [`spectral_heat`]: a constructive null-control scheme for the 1-D
//!   stochastic heat equation driven by spectral observability estimates;
//! - [`carleman`]: Carleman weight functions and a pointwise-identity
//!   verifier for the associated weighted energy computation.

pub mod bsde;
pub mod carleman;
pub mod controllability;
pub mod error;
pub mod max_principle;
pub mod spectral_heat;
pub mod stats;
pub mod stochastic;

pub use error::{Error, Result};
