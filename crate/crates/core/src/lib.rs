//! A miniature tensor compiler for scratchpad-memory vector accelerators.
// `!(x > 0.0)` style checks are used on purpose so NaN fails them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod frontend;
pub mod ir;
pub mod mathlib;
pub mod passes;
pub mod driver;
pub mod shipped;
pub mod tensor_io;
pub mod interp;
pub mod oracles;
pub mod perf;
