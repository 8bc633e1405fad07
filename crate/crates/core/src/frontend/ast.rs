use std::fmt;

use crate::ir::ElemType;

/// 1-based source position of a token or construct.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct SourceSpan {
    pub line: u32,
    pub column: u32,
    pub length: u32,
}

impl fmt::Display for SourceSpan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.line, self.column)
    }
}

/// How a parameter or value is laid out relative to the row program.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ValueClass {
    /// One element per (row, column).
    Row,
    /// One element per row (the result of an axis reduction).
    Scalar,
    /// One element per column, shared by every row.
    Shared,
}

impl ValueClass {
    pub fn keyword(self) -> &'static str {
        match self {
            ValueClass::Row => "row",
            ValueClass::Scalar => "scalar",
            ValueClass::Shared => "shared",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub class: ValueClass,
    pub elem: ElemType,
    pub span: SourceSpan,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConstDecl {
    pub name: String,
    pub value: f32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinOp {
    pub fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Builtin {
    Exp,
    Tanh,
    Sqrt,
    Rsqrt,
    /// Two-argument elementwise max.
    Max2,
}

impl Builtin {
    pub fn name(self) -> &'static str {
        match self {
            Builtin::Exp => "exp",
            Builtin::Tanh => "tanh",
            Builtin::Sqrt => "sqrt",
            Builtin::Rsqrt => "rsqrt",
            Builtin::Max2 => "max",
        }
    }

    pub fn arity(self) -> usize {
        if self == Builtin::Max2 {
            2
        } else {
            1
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ReduceOp {
    Sum,
    Max,
}

impl ReduceOp {
    pub fn name(self) -> &'static str {
        match self {
            ReduceOp::Sum => "sum",
            ReduceOp::Max => "max",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Expr {
    pub kind: ExprKind,
    pub span: SourceSpan,
}

/// Spans are ignored by equality so re-parsed printouts compare equal.
impl PartialEq for Expr {
    fn eq(&self, other: &Self) -> bool {
        self.kind == other.kind
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ExprKind {
    Num(f32),
    /// Parameter, earlier statement target, constant or `COLS`.
    Ident(String),
    Neg(Box<Expr>),
    Binary(BinOp, Box<Expr>, Box<Expr>),
    Call(Builtin, Vec<Expr>),
    Reduce { op: ReduceOp, arg: Box<Expr>, axis: i64 },
    /// Whole-row load of a parameter.
    Load(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum StmtKind {
    Load,
    Elementwise,
    Reduce,
    Store,
}

#[derive(Clone, Debug)]
pub struct Stmt {
    pub target: String,
    pub kind: StmtKind,
    pub expr: Expr,
    pub span: SourceSpan,
}

impl PartialEq for Stmt {
    fn eq(&self, other: &Self) -> bool {
        self.target == other.target && self.kind == other.kind && self.expr == other.expr
    }
}

/// Parsed and checked kernel.
#[derive(Clone, Debug)]
pub struct KernelAst {
    pub name: String,
    pub consts: Vec<ConstDecl>,
    pub inputs: Vec<Param>,
    pub outputs: Vec<Param>,
    pub stmts: Vec<Stmt>,
}

impl PartialEq for KernelAst {
    fn eq(&self, other: &Self) -> bool {
        let strip = |ps: &[Param]| ps.iter().map(|p| (p.name.clone(), p.class, p.elem)).collect::<Vec<_>>();
        self.name == other.name
            && self.consts == other.consts
            && strip(&self.inputs) == strip(&other.inputs)
            && strip(&self.outputs) == strip(&other.outputs)
            && self.stmts == other.stmts
    }
}

impl KernelAst {
    pub fn const_value(&self, name: &str) -> Option<f32> {
        self.consts.iter().find(|c| c.name == name).map(|c| c.value)
    }

    pub fn input(&self, name: &str) -> Option<&Param> {
        self.inputs.iter().find(|p| p.name == name)
    }

    pub fn output(&self, name: &str) -> Option<&Param> {
        self.outputs.iter().find(|p| p.name == name)
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            ExprKind::Num(v) => write!(f, "{v:?}"),
            ExprKind::Ident(n) => f.write_str(n),
            ExprKind::Neg(x) => write!(f, "-({x})"),
            ExprKind::Binary(op, a, b) => write!(f, "({a} {} {b})", op.symbol()),
            ExprKind::Call(b, args) => {
                let args: Vec<String> = args.iter().map(ToString::to_string).collect();
                write!(f, "{}({})", b.name(), args.join(", "))
            }
            ExprKind::Reduce { op, arg, axis } => write!(f, "{}({arg}, axis={axis})", op.name()),
            ExprKind::Load(p) => write!(f, "load({p})"),
        }
    }
}

fn write_params(f: &mut fmt::Formatter<'_>, params: &[Param]) -> fmt::Result {
    let ps: Vec<String> =
        params.iter().map(|p| format!("{}: {}<{}>", p.name, p.class.keyword(), p.elem)).collect();
    f.write_str(&ps.join(", "))
}

/// Prints source that parses back to an equal AST.
impl fmt::Display for KernelAst {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.consts {
            writeln!(f, "const {} = {:?};", c.name, c.value)?;
        }
        write!(f, "kernel {}(", self.name)?;
        write_params(f, &self.inputs)?;
        f.write_str(") -> (")?;
        write_params(f, &self.outputs)?;
        f.write_str(") {\n")?;
        for s in &self.stmts {
            writeln!(f, "  {} = {};", s.target, s.expr)?;
        }
        f.write_str("}\n")
    }
}
