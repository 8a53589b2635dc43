//! Structure-preserving simulation of continuum mechanics on Riemannian
//! charts: metrics and Christoffel symbols, configuration fields and jets,
//! material models with analytic stress derivatives, Euler-Lagrange
//! residuals, a variational space-time integrator, and conservation-law
//! diagnostics.

pub mod conservation;
pub mod dynamics;
pub mod error;
pub mod exec;
pub mod fields;
pub mod geometry;
pub mod integrator;
pub mod material;

pub use error::{Error, Result};
