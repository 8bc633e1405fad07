//! Row-program kernel DSL: lexer, parser, checker and lowering to generics.
//!
//! Grammar is in `docs/grammar.md`.

mod ast;
mod lexer;
mod lower;
mod parser;

use std::fmt;

use thiserror::Error;

pub use ast::{
    BinOp, Builtin, ConstDecl, Expr, ExprKind, KernelAst, Param, ReduceOp, SourceSpan, Stmt, StmtKind, ValueClass,
};
pub use lower::{lower_to_generics, RowShape};
pub use parser::{parse_kernel, COLS};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrontendErrorKind {
    Lex,
    Parse,
    Undefined,
    DuplicateStore,
    MissingStore,
    BadAxis,
    Unsupported,
}

impl fmt::Display for FrontendErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FrontendErrorKind::Lex => "lex error",
            FrontendErrorKind::Parse => "parse error",
            FrontendErrorKind::Undefined => "undefined identifier",
            FrontendErrorKind::DuplicateStore => "duplicate store",
            FrontendErrorKind::MissingStore => "missing store",
            FrontendErrorKind::BadAxis => "bad reduction axis",
            FrontendErrorKind::Unsupported => "unsupported construct",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
#[error("{span}: {kind}: {message}")]
pub struct FrontendError {
    pub kind: FrontendErrorKind,
    pub span: SourceSpan,
    pub message: String,
}

impl FrontendError {
    pub fn new(kind: FrontendErrorKind, span: SourceSpan, message: impl Into<String>) -> Self {
        Self { kind, span, message: message.into() }
    }
}

/// Parses and lowers in one step.
pub fn compile_source(source: &str, shape: RowShape) -> Result<crate::ir::KernelProgram, FrontendError> {
    lower_to_generics(&parse_kernel(source)?, shape)
}
