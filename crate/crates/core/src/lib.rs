#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod auction;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod graph;
pub mod harness;
pub mod loss;
pub mod model;
pub mod params;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
