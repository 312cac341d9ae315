// `!(x > 0.0)` is the NaN-rejecting form used by the validators.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod analysis;
pub mod datasets;
pub mod experiments;
pub mod geometry;
pub mod models;
pub mod objectives;
pub mod optim;
pub mod seed;
pub mod tensor;
pub mod transfer;
