//! Numerical and symbolic toolkit for the tangential Cauchy-Riemann equation
//! on quadric CR manifolds of higher codimension.
//!
//! The crate builds the Cauchy-Fantappie kernels of a barrier-based homotopy
//! formula, evaluates the resulting integral operators by quadrature on the
//! tubes `M_eps = {rho = eps}`, and turns the index bookkeeping behind the
//! vanishing arguments into executable decision procedures.
//!
//! Modules follow the data flow: [`model`] and [`geometry`] describe the
//! manifold, [`barrier`] and [`cf_kernels`] build the kernels, [`quadrature`]
//! and [`homotopy`] integrate them, [`index_calculus`] checks the symbolic
//! side and [`norms`] samples the anisotropic Hoelder quotients.

pub mod barrier;
pub mod cf_kernels;
pub mod exec;
pub mod fields;
pub mod forms;
pub mod geometry;
pub mod homotopy;
pub mod index_calculus;
pub mod linalg;
pub mod model;
pub mod norms;
pub mod numeric;
pub mod quadrature;
pub mod report;
pub mod suite;

pub use num_complex::Complex64 as C64;

/// Report schema version carried by every JSON document the crate emits.
pub const SCHEMA_VERSION: &str = "crq-report/1";
