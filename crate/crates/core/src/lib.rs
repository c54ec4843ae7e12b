//! Rehearsal-free class-incremental learning with one shared prefix prompt,
//! per-task linear heads and virtual-outlier energy regularization.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod head;
pub mod kernel;
pub mod npos;
pub mod regularizer;

pub use error::{Error, Result};
