//! Numerical laboratory for the Kakinuma model of two-layer interfacial
//! gravity waves in nondimensional form.
//!
//! Fields live on a periodic grid ([`spectral_grid`]); the model operators are
//! in [`kakinuma_ops`]; [`elliptic_solver`] reconstructs the potentials from
//! the canonical variables; [`evolution`] integrates in time;
//! [`reference_laplace`] solves the full Laplace problems that serve as
//! references for [`consistency_lab`].

pub mod chebyshev;
pub mod consistency_lab;
pub mod elliptic_solver;
pub mod error;
pub mod evolution;
pub mod format;
pub mod kakinuma_ops;
pub mod linalg;
pub mod params_core;
pub mod reference_laplace;
pub mod spectral_grid;

pub use error::{KakinumaError, Result};
