//! Bayesian adaptive scalar-on-function regression.
//!
//! The regression coefficient function is expanded in an equally spaced
//! cubic B-spline basis and its second-differenced coefficients receive a
//! dynamic horseshoe prior, whose log-variances follow a stationary AR(1)
//! with Z-distributed innovations. Posterior draws feed a decision analysis
//! that extracts locally constant summaries of the coefficient function by
//! fitting a fused lasso to posterior predictive targets, and selects critical
//! windows from the simplest member of an acceptable family.
//!
//! Module map:
//!
//! - [`basis`]: B-spline construction, evaluation, exact cross-Gram integrals
//!   and the second-difference operator.
//! - [`funcdata`]: curve smoothing, scalar covariate expansion and the reduced
//!   regression design.
//! - [`dhs`]: Pólya-Gamma draws, the log-χ² mixture and the O(K) log-volatility
//!   sampler.
//! - [`gibbs`]: the full sampler, its prior variants and posterior summaries.
//! - [`decision`]: aggregated trajectories, the fused lasso path, loss
//!   diagnostics, acceptable families and window extraction.
//! - [`simulate`]: synthetic designs and evaluation metrics.
//! - [`archive`]: on-disk draw archives and delimited tables.

pub mod archive;
pub mod basis;
pub mod decision;
pub mod dhs;
mod error;
pub mod funcdata;
pub mod gibbs;
pub mod linalg;
pub mod quadrature;
pub mod simulate;
pub mod stats;

pub use error::{Error, Result};
