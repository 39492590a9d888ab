//! Numerical laboratory for the white-noise Feynman integrand of a charged
//! particle in a constant magnetic field.
//!
//! The crate discretizes the Volterra operator `A`, its pairing-adjoint and
//! the block operators `K`, `L`, `N = Id + K + L` on a midpoint grid over
//! `[0, t)`, checks their spectrum and Fredholm determinant against closed
//! forms, solves the preimage equations, and composes T-transforms and the
//! propagator from those ingredients.
//!
//! Units: `ħ = m = 1`; the model is fixed by the coupling `k` and the duration `t`.

pub mod cache;
pub mod cli;
pub mod error;
pub mod exec;
pub mod feynman;
pub mod fredholm;
pub mod gausskernels;
pub mod grid;
pub mod operators;
pub mod report;
pub mod spectral;
pub mod testfunctions;
pub mod verify;

pub use error::{Error, Result};
pub use grid::{make_grid, pair, sample, Grid, GridFunctionPair};
pub use operators::{BlockOperator, MagneticModel};

/// Complex scalar used throughout.
pub type C64 = num_complex::Complex64;

/// The imaginary unit.
pub const I: C64 = C64::new(0.0, 1.0);
