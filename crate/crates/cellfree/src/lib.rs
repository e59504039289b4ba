// Index loops mirror the matrix subscripts in the math throughout, and
// validation guards use negated comparisons so NaN inputs fail them too.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod association;
pub mod channel;
pub mod config;
pub mod error;
pub mod geometry;
pub mod linalg;
pub mod power;
pub mod rate;
pub mod seeds;
pub mod sim;
pub mod training;
