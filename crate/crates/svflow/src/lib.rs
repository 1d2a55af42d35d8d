//! Score-based variational flows: mixture-family ODE flows on Euclidean and
//! spherical domains, a hybrid variational training objective with analytic
//! gradients, a toy spherical transformer, and a diagnostic metric suite.

pub mod attention;
pub mod bessel;
pub mod data;
pub mod distributions;
pub mod error;
pub mod flow;
pub mod geometry;
pub mod train;
pub mod linalg;
pub mod metrics;

pub use error::{Error, Result};
