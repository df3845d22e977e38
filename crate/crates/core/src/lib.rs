//! Numerical solvers for the indefinite Chern–Simons vortex system of the
//! bilayer fractional quantum Hall effect.
//!
//! The system for the layer densities `e^u`, `e^v` is
//!
//! ```text
//! Δu = 4 k11 e^u + 4 k12 e^v − 4 + 4π Σ δ_{p_j}
//! Δv = 4 k12 e^u + 4 k11 e^v − 4 + 4π Σ δ_{q_j}
//! ```
//!
//! with `det K = 4q/p < 0`. The crate provides doubly periodic, bounded-domain
//! and full-plane solvers, the integral identities they must satisfy, and the
//! tooling to measure decay rates of topological solutions.

pub mod diagnostics;
pub mod elliptic;
pub mod error;
pub mod fullplane;
pub mod grid;
pub mod params;
pub mod sources;
pub mod variational;

pub use error::{Error, Result};
pub use grid::{Boundary, DomainSpec, Grid, ScalarField};
pub use params::{
    build_coupling, classify_regime, CouplingMatrix, CouplingParams, Point, Regime,
    VortexConfiguration,
};
