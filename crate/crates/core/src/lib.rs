//! Black-box variational inference with mean-field, full-rank, and bordered
//! block-diagonal location-scale families.
//!
//! The pieces, bottom up:
//! - [`scale`]: triangular scale matrices and the entropic proximal operator
//! - [`family`]: base distributions, reparameterization, entropy, ELBO
//! - [`targets`]: finite-sum negative log-joints with exact oracles
//! - [`estimator`]: the M-sample reparameterization gradient
//! - [`optimizer`]: proximal SGD, SGD, and Adam loops with traces
//! - [`diagnostics`]: gradient variance, theoretical bounds, probes
//! - [`experiments`]: config, sweep drivers, CSV output

// `!(x > 0.0)` rejects NaN as well; index loops mirror the matrix algebra.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod diagnostics;
pub mod error;
pub mod estimator;
pub mod experiments;
pub mod family;
pub mod optimizer;
pub mod rng;
pub mod scale;
pub mod targets;

pub use error::{Error, Result};
pub use family::{BaseDistribution, Family, Init, VariationalParams};
pub use scale::{BlockLayout, ScaleMatrix, SparsityDescriptor, Structure};
