// Negated comparisons are how validation rejects NaN alongside bad values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod device;
pub mod frontend;
pub mod grid;
pub mod linalg;
pub mod network;
pub mod transient;
pub mod programming;
pub mod config;
pub mod io;
