//! Multivariate spatio-temporal mixed effects models for high-dimensional
//! areal data: Moran's I bases and propagators, Frobenius-optimal prior
//! shapes, an FFBS Gibbs sampler, prediction, diagnostics and a replicate
//! study harness.

pub mod basis;
pub mod config;
pub mod diagnostics;
pub mod error;
pub mod graph;
pub mod io;
pub mod linalg;
pub mod model;
pub mod prior;
pub mod propagator;
pub mod sampler;
pub mod study;

pub use error::{MstmError, Result};
