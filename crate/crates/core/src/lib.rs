//! Monte Carlo item recovery for the compensatory multidimensional graded
//! response model (MGRM).
//!
//! The crate covers the whole study loop: drawing true item parameters and
//! correlated abilities, simulating polytomous responses, re-estimating the
//! items by marginal maximum likelihood (EM over a rectangular quadrature
//! grid), scoring recovery with bias and RMSE, and rendering the results
//! table and faceted SVG figures.

pub mod config;
pub mod design;
pub mod error;
pub mod estimator;
pub mod grm;
pub mod metrics;
pub mod pipeline;
pub mod report;
pub mod rng;

pub use error::{Error, Result};
