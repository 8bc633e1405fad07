//! Independent references used by the tests: f64 formulas, a direct AST
//! evaluator, a random kernel generator and a schedule walker.

mod ast_eval;
mod formula;
mod random;
mod schedule;

pub use ast_eval::{eval_ast, Real};
pub use formula::{gelu, oracle_eval, rmsnorm_row, silu, softmax_row};
pub use random::{gen_random_program, gen_random_source, PaletteOp, RandomProgramSpec, FULL_PALETTE, SHAPES};
pub use schedule::{output_coverage, scan_schedule, Coverage, RegionWrite, ScheduleScan};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum OracleError {
    #[error("unknown kernel `{0}`")]
    UnknownKernel(String),
    #[error("missing tensor `{0}`")]
    MissingInput(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("schedule: {0}")]
    Schedule(String),
}
