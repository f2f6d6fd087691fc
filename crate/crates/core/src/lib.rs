//! Riemannian stochastic gradient descent on finite sample spaces.

// `!(a <= b)` is used on purpose so that NaN fails every check
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod batching;
pub mod confinement;
pub mod diagnostics;
pub mod driver;
pub mod error;
pub mod linalg;
pub mod manifold;
pub mod problems;
pub mod schedules;

pub use error::{Error, Result};
