//! Certified step sizes for gradient descent on two-factor matrix models.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod experiments;
pub mod init;
pub mod loss;
pub mod matrix;
pub mod scheduler;
pub mod trainer;

pub use error::{Error, Result};
