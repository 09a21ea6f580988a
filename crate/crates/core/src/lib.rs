//! Matrix product state Born machines trained by single-site sweeps with
//! steepest descent, Riemannian Newton steps, or regularized Newton steps.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cvbm;
pub mod data;
pub mod env;
pub mod error;
pub mod experiment;
pub mod loss;
pub mod mps;
pub mod newton;
pub mod sweep;
pub mod tensor;

pub use error::{Error, Result};
pub use mps::{Direction, Mps};
