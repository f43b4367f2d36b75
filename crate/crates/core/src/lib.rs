// Validation writes `!(v > bound)` on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// `stage(name, (|| { .. })())` stands in for a try block.
#![allow(clippy::redundant_closure_call)]
// Grid and matrix loops read better with explicit indices.
#![allow(clippy::needless_range_loop)]

pub mod classifier;
pub mod config;
pub mod correction;
pub mod data;
pub mod distributions;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod noise;
pub mod optim;
pub mod pipeline;
pub mod registry;
pub mod rng;
pub mod special;
pub mod tensor;
pub mod theory;

pub use error::{Error, Result};
