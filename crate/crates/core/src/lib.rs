// NaN-rejecting guards are written as `!(x > 0.0)` on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dictionary;
pub mod domain;
pub mod dynamics;
pub mod error;
pub mod io;
pub mod local_control;
pub mod ocp;
pub mod operators;
pub mod parallel;
pub mod pipeline;
pub mod solver;
pub mod validation;

pub use error::{Error, Result};
