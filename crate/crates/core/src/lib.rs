//! Multiscale Petrov-Galerkin finite elements for the Helmholtz equation
//! with large wave numbers on structured tensor-product grids.
//!
//! Trial functions are the standard coarse `Q1` hat functions. Test
//! functions are hats minus fine-scale correctors computed on
//! `m`-layer patches around each coarse cell, subject to a vanishing
//! quasi-interpolation. On structured grids the corrector problems only
//! depend on the local patch configuration, so they are solved once per
//! configuration class and reused by translation.
//!
//! Module map:
//!
//! * [`grid`]: box domains with rectangular holes, uniform refinement,
//!   patches and patch classification.
//! * [`assembly`]: closed-form `Q1` element matrices, global and patch
//!   assembly of the sesquilinear form, loads and `V`-norms.
//! * [`interpolation`]: the quasi-interpolation `I_H = E_H ∘ Π_H`.
//! * [`corrector`]: localized corrector problems, configuration cache and
//!   the corrected test basis.
//! * [`solver`]: sparse direct factorization, the Petrov-Galerkin coarse
//!   system, standard FEM and `V`-best approximation.
//! * [`harness`]: built-in problems, experiment configs and convergence
//!   tables.

pub mod assembly;
pub mod corrector;
pub mod error;
pub mod grid;
pub mod harness;
pub mod interpolation;
pub mod quadrature;
pub mod solver;
pub mod sparse;

pub use error::{Error, Result};
pub use num_complex::Complex64;
