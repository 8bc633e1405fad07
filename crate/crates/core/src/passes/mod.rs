//! Program-to-program transformations. Every structural pass here preserves
//! interpreter results bit for bit; only [`crate::mathlib::expand_math_ops`]
//! trades accuracy.

pub mod double_buffer;
pub mod fusion;
pub mod threading;
pub mod tiling;
pub mod vectorize;

use std::collections::HashMap;

use thiserror::Error;

use crate::ir::{IndexExpr, OpId, Val, Var};
use crate::mathlib::MathError;

pub use double_buffer::{db_dma, db_structural};
pub use fusion::{fuse_elementwise, fusion_legal, FusionCandidate, RejectReason};
pub use threading::{form_async_threads, form_virtual_threads, Distribution, ThreadingOptions};
pub use tiling::{tile_generic, TileSpec};
pub use vectorize::vectorize_innermost;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PassError {
    #[error("{op}: cannot tile reduction dimension d{dim}")]
    TileReduction { op: OpId, dim: usize },
    #[error("{op}: tile set needs {need} bytes of TCM, capacity is {budget}")]
    TcmBudget { op: OpId, need: usize, budget: usize },
    #[error("invalid tile spec: {0}")]
    BadTileSpec(String),
    #[error("vector width must be at least 1")]
    VectorWidth,
    #[error("invalid thread distribution: {0}")]
    Distribution(String),
    #[error("{0}: nested forall is not supported")]
    NestedForall(OpId),
    #[error("db annotations absent")]
    DbAnnotationsAbsent,
    #[error(transparent)]
    Math(#[from] MathError),
}

/// Interval bounds of loop variables and view extents, for static size queries.
#[derive(Clone, Debug, Default)]
pub(crate) struct Bounds {
    vars: HashMap<Var, (i64, i64)>,
    dims: HashMap<(Val, usize), (i64, i64)>,
}

impl Bounds {
    pub(crate) fn of(&self, e: &IndexExpr) -> Option<(i64, i64)> {
        e.bounds(&|v| self.vars.get(&v).copied(), &|v, a| self.dims.get(&(v, a)).copied())
    }

    pub(crate) fn set_var(&mut self, v: Var, lo: i64, hi: i64) {
        self.vars.insert(v, (lo, hi));
    }

    pub(crate) fn set_dims(&mut self, v: Val, dims: Vec<Option<(i64, i64)>>) {
        for (a, d) in dims.into_iter().enumerate() {
            if let Some(d) = d {
                self.dims.insert((v, a), d);
            }
        }
    }
}
