//! Feature-space out-of-distribution detection with an energy-based
//! correction of a class-conditional Gaussian mixture.
//!
//! The model density is `p(z) ∝ exp(-(E_net(z) + E_G(z)))`, where `E_G` is
//! the energy of a tied-covariance Gaussian mixture fitted to in-distribution
//! features and `E_net` is a small network trained by maximum likelihood with
//! Langevin negatives started from the mixture.

// Negated comparisons below are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod detectors;
pub mod energy_net;
pub mod error;
pub mod featurestore;
pub mod linalg;
pub mod metrics;
pub mod mog;
pub mod numeric;
pub mod sgld;
pub mod toy;
pub mod trainer;

pub use error::{Error, ParseError, Result};
