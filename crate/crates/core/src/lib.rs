// NaN must fail the range checks, hence `!(x > 0.0)` style comparisons.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::too_many_arguments, clippy::type_complexity)]

pub mod error;
pub mod features;
pub mod gridding;
pub mod ingest;

pub use error::{Error, Result};
pub mod tensor;
pub mod eval;
pub mod parallel;
pub mod models;
pub mod ensemble;
pub mod synth;
pub mod pipeline;
