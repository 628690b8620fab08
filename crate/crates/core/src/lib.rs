// Range loops over several parallel arrays read better than zipped iterators,
// and `!(x >= 0.0)` is used on purpose to reject NaN.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod convergence;
pub mod error;
pub mod meanfield;
pub mod measures;
pub mod models;
pub mod particles;
pub mod rbsde;
pub mod mpp;
pub mod rng;

pub use error::{Error, Result};
