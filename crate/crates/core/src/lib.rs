//! De-biased convex-regularized estimation in Gaussian-design linear models.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod debias;
pub mod error;
pub mod inference;
pub mod model;
pub mod normal;
pub mod parallel;
pub mod penalty;
pub mod rng;
pub mod sim;
pub mod stein;

pub use error::{Error, Result};
