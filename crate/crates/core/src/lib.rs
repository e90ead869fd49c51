//! Semantic segmentation over a language-embedding label space.

// `!(x > 0.0)` style checks are there to reject NaN along with the range.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod io;
pub mod label_space;
pub mod loss;
pub mod seed;
pub mod seg_head;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
