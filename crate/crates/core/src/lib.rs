//! Adversarial training and robustness geometry of small ReLU networks.

// `!(x > 0.0)` is how argument checks reject NaN along with bad values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attacks;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod geometry;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
