//! Temporal action detection as 1D semantic segmentation.

// `!(x > 0.0)` also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod eval;
pub mod labels;
pub mod pdn;
pub mod pipeline;
pub mod ssn;
pub mod tensor;

pub use config::Config;
pub use error::{Error, Result};
