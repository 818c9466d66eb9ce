//! Desk-scale finite-element solver for cardiac electro-fluid-structure
//! interaction on an idealized left ventricle.
//!
//! The crate couples four subproblems over a heartbeat:
//! monodomain electrophysiology with a pluggable ionic model, an ODE force
//! generation model, hyperelastic active-stress elastodynamics, and
//! incompressible Navier-Stokes flow on a moving (ALE) domain with
//! switching valve boundary conditions. Three time-coupling strategies are
//! provided and instrumented for comparison: a fully loosely coupled
//! Robin-Neumann scheme, a monolithic implicit fluid-structure scheme, and
//! a hybrid scheme performing a fixed number of Robin-Neumann sweeps.

pub mod activation;
pub mod coupling;
pub mod ep;
pub mod error;
pub mod fem;
pub mod fibers;
pub mod fluid;
pub mod indicators;
pub mod instrument;
pub mod mesh;
pub mod solid;

pub use error::{Error, Result};
