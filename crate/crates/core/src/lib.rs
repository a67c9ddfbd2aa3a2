#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cli;
pub mod data;
pub mod encoder;
pub mod error;
pub mod experiments;
pub mod model;
pub mod numerics;
pub mod rotary;
pub mod simulator;
pub mod tpp_head;
pub mod trainer;

pub use error::{Error, Result};
