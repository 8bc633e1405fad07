use std::collections::{HashMap, HashSet};

use super::ast::*;
use super::lexer::{lex, Tok, Token};
use super::{FrontendError, FrontendErrorKind};
use crate::ir::ElemType;

/// Builtin identifier holding the row length.
pub const COLS: &str = "COLS";

struct Parser {
    toks: Vec<Token>,
    pos: usize,
}

fn parse_err(span: SourceSpan, msg: impl Into<String>) -> FrontendError {
    FrontendError::new(FrontendErrorKind::Parse, span, msg)
}

fn describe(t: &Tok) -> String {
    match t {
        Tok::Ident(s) => format!("`{s}`"),
        Tok::Number(s) => format!("number `{s}`"),
        Tok::Punct(p) => format!("`{p}`"),
        Tok::Eof => "end of input".into(),
    }
}

impl Parser {
    fn peek(&self) -> &Token {
        &self.toks[self.pos]
    }

    fn next(&mut self) -> Token {
        let t = self.toks[self.pos].clone();
        if t.tok != Tok::Eof {
            self.pos += 1;
        }
        t
    }

    fn at_punct(&self, p: &str) -> bool {
        matches!(&self.peek().tok, Tok::Punct(q) if *q == p)
    }

    fn at_keyword(&self, k: &str) -> bool {
        matches!(&self.peek().tok, Tok::Ident(s) if s == k)
    }

    fn expect_punct(&mut self, p: &str) -> Result<SourceSpan, FrontendError> {
        let t = self.next();
        match t.tok {
            Tok::Punct(q) if q == p => Ok(t.span),
            other => Err(parse_err(t.span, format!("expected `{p}`, found {}", describe(&other)))),
        }
    }

    fn expect_ident(&mut self, what: &str) -> Result<(String, SourceSpan), FrontendError> {
        let t = self.next();
        match t.tok {
            Tok::Ident(s) => Ok((s, t.span)),
            other => Err(parse_err(t.span, format!("expected {what}, found {}", describe(&other)))),
        }
    }

    fn expect_keyword(&mut self, k: &str) -> Result<SourceSpan, FrontendError> {
        let (s, span) = self.expect_ident(&format!("`{k}`"))?;
        if s == k {
            Ok(span)
        } else {
            Err(parse_err(span, format!("expected `{k}`, found `{s}`")))
        }
    }

    fn number(&mut self) -> Result<(f32, SourceSpan), FrontendError> {
        let neg = if self.at_punct("-") {
            self.next();
            true
        } else {
            false
        };
        let t = self.next();
        match t.tok {
            Tok::Number(s) => {
                let v: f32 = s.parse().expect("lexer validated number");
                Ok((if neg { -v } else { v }, t.span))
            }
            other => Err(parse_err(t.span, format!("expected number, found {}", describe(&other)))),
        }
    }

    fn program(&mut self) -> Result<KernelAst, FrontendError> {
        let mut consts = Vec::new();
        while self.at_keyword("const") {
            self.next();
            let (name, _) = self.expect_ident("constant name")?;
            self.expect_punct("=")?;
            let (value, _) = self.number()?;
            self.expect_punct(";")?;
            consts.push(ConstDecl { name, value });
        }
        self.expect_keyword("kernel")?;
        let (name, _) = self.expect_ident("kernel name")?;
        self.expect_punct("(")?;
        let inputs = self.params()?;
        self.expect_punct(")")?;
        self.expect_punct("->")?;
        self.expect_punct("(")?;
        let outputs = self.params()?;
        self.expect_punct(")")?;
        self.expect_punct("{")?;
        let mut stmts = Vec::new();
        while !self.at_punct("}") {
            stmts.push(self.stmt()?);
        }
        self.expect_punct("}")?;
        let t = self.peek();
        if t.tok != Tok::Eof {
            return Err(parse_err(t.span, format!("unexpected {} after kernel body", describe(&t.tok))));
        }
        Ok(KernelAst { name, consts, inputs, outputs, stmts })
    }

    fn params(&mut self) -> Result<Vec<Param>, FrontendError> {
        let mut out = Vec::new();
        loop {
            let (name, span) = self.expect_ident("parameter name")?;
            self.expect_punct(":")?;
            let (class, cspan) = self.expect_ident("parameter kind")?;
            let class = match class.as_str() {
                "row" => ValueClass::Row,
                "shared" => ValueClass::Shared,
                "scalar" => ValueClass::Scalar,
                other => return Err(parse_err(cspan, format!("unknown parameter kind `{other}`"))),
            };
            self.expect_punct("<")?;
            let (elem, espan) = self.expect_ident("element type")?;
            let elem = match elem.as_str() {
                "f32" => ElemType::F32,
                "f16" => ElemType::F16,
                other => return Err(parse_err(espan, format!("unknown element type `{other}`"))),
            };
            self.expect_punct(">")?;
            out.push(Param { name, class, elem, span });
            if !self.at_punct(",") {
                return Ok(out);
            }
            self.next();
        }
    }

    fn stmt(&mut self) -> Result<Stmt, FrontendError> {
        let (target, span) = self.expect_ident("statement target")?;
        self.expect_punct("=")?;
        let expr = self.expr()?;
        self.expect_punct(";")?;
        // kind is settled by the checker
        Ok(Stmt { target, kind: StmtKind::Elementwise, expr, span })
    }

    fn expr(&mut self) -> Result<Expr, FrontendError> {
        let mut lhs = self.term()?;
        while self.at_punct("+") || self.at_punct("-") {
            let op = if self.at_punct("+") { BinOp::Add } else { BinOp::Sub };
            self.next();
            let rhs = self.term()?;
            let span = lhs.span;
            lhs = Expr { kind: ExprKind::Binary(op, Box::new(lhs), Box::new(rhs)), span };
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr, FrontendError> {
        let mut lhs = self.unary()?;
        while self.at_punct("*") || self.at_punct("/") {
            let op = if self.at_punct("*") { BinOp::Mul } else { BinOp::Div };
            self.next();
            let rhs = self.unary()?;
            let span = lhs.span;
            lhs = Expr { kind: ExprKind::Binary(op, Box::new(lhs), Box::new(rhs)), span };
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr, FrontendError> {
        if self.at_punct("-") {
            let span = self.next().span;
            let x = self.unary()?;
            return Ok(Expr { kind: ExprKind::Neg(Box::new(x)), span });
        }
        self.primary()
    }

    fn primary(&mut self) -> Result<Expr, FrontendError> {
        let t = self.next();
        match t.tok {
            Tok::Number(s) => Ok(Expr { kind: ExprKind::Num(s.parse().expect("lexer validated number")), span: t.span }),
            Tok::Punct("(") => {
                let e = self.expr()?;
                self.expect_punct(")")?;
                Ok(e)
            }
            Tok::Ident(name) if self.at_punct("(") => self.call(name, t.span),
            Tok::Ident(name) => Ok(Expr { kind: ExprKind::Ident(name), span: t.span }),
            other => Err(parse_err(t.span, format!("expected expression, found {}", describe(&other)))),
        }
    }

    fn call(&mut self, name: String, span: SourceSpan) -> Result<Expr, FrontendError> {
        self.expect_punct("(")?;
        let mut args = Vec::new();
        let mut axis = None;
        loop {
            if self.at_keyword("axis") && matches!(self.toks[self.pos + 1].tok, Tok::Punct("=")) {
                let aspan = self.next().span;
                self.next();
                let (v, vspan) = self.number()?;
                if v.fract() != 0.0 {
                    return Err(parse_err(vspan, "axis must be an integer"));
                }
                axis = Some((v as i64, aspan));
            } else {
                if axis.is_some() {
                    return Err(parse_err(self.peek().span, "`axis=` must be the last argument"));
                }
                args.push(self.expr()?);
            }
            if self.at_punct(",") {
                self.next();
                continue;
            }
            self.expect_punct(")")?;
            break;
        }
        let reduce = match name.as_str() {
            "sum" => Some(ReduceOp::Sum),
            "max" if axis.is_some() || args.len() == 1 => Some(ReduceOp::Max),
            _ => None,
        };
        if let Some(op) = reduce {
            let Some((axis, _)) = axis else {
                return Err(parse_err(span, format!("`{name}` reduction needs an `axis=` argument")));
            };
            if args.len() != 1 {
                return Err(parse_err(span, format!("`{name}` reduction takes one operand")));
            }
            let arg = Box::new(args.pop().unwrap());
            return Ok(Expr { kind: ExprKind::Reduce { op, arg, axis }, span });
        }
        if let Some((_, aspan)) = axis {
            return Err(parse_err(aspan, format!("`{name}` takes no axis")));
        }
        if name == "load" {
            return match args.as_slice() {
                [Expr { kind: ExprKind::Ident(p), .. }] => Ok(Expr { kind: ExprKind::Load(p.clone()), span }),
                _ => Err(parse_err(span, "`load` takes one parameter name")),
            };
        }
        let builtin = match name.as_str() {
            "exp" => Builtin::Exp,
            "tanh" => Builtin::Tanh,
            "sqrt" => Builtin::Sqrt,
            "rsqrt" => Builtin::Rsqrt,
            "max" => Builtin::Max2,
            _ => {
                return Err(FrontendError::new(
                    FrontendErrorKind::Unsupported,
                    span,
                    format!("unknown function `{name}`"),
                ))
            }
        };
        if args.len() != builtin.arity() {
            return Err(parse_err(span, format!("`{name}` takes {} argument(s), got {}", builtin.arity(), args.len())));
        }
        Ok(Expr { kind: ExprKind::Call(builtin, args), span })
    }
}

/// Parses and checks a kernel source.
pub fn parse_kernel(source: &str) -> Result<KernelAst, FrontendError> {
    let toks = lex(source)?;
    let mut ast = Parser { toks, pos: 0 }.program()?;
    check(&mut ast)?;
    Ok(ast)
}

/// Value class of an expression. `None` means constant (no tensor operands).
pub(crate) fn class_of(
    e: &Expr,
    env: &HashMap<String, ValueClass>,
) -> Result<Option<ValueClass>, FrontendError> {
    Ok(match &e.kind {
        ExprKind::Num(_) => None,
        ExprKind::Ident(n) => env.get(n).copied(),
        ExprKind::Load(p) => env.get(p).copied(),
        ExprKind::Neg(x) => class_of(x, env)?,
        ExprKind::Binary(_, a, b) => join(class_of(a, env)?, class_of(b, env)?),
        ExprKind::Call(_, args) => {
            let mut c = None;
            for a in args {
                c = join(c, class_of(a, env)?);
            }
            c
        }
        ExprKind::Reduce { arg, axis, op } => {
            if *axis != 0 {
                return Err(FrontendError::new(
                    FrontendErrorKind::BadAxis,
                    e.span,
                    format!("{} over axis {axis}; row programs only reduce along axis 0", op.name()),
                ));
            }
            match class_of(arg, env)? {
                Some(ValueClass::Row) | Some(ValueClass::Shared) => Some(ValueClass::Scalar),
                _ => {
                    return Err(FrontendError::new(
                        FrontendErrorKind::BadAxis,
                        e.span,
                        format!("{} over axis 0 of a per-row scalar", op.name()),
                    ))
                }
            }
        }
    })
}

/// Class of a value combining two operands; constants (`None`) broadcast.
fn join(a: Option<ValueClass>, b: Option<ValueClass>) -> Option<ValueClass> {
    use ValueClass::*;
    match (a, b) {
        (None, x) | (x, None) => x,
        (Some(Row), _) | (_, Some(Row)) => Some(Row),
        (Some(Shared), Some(Shared)) => Some(Shared),
        (Some(Scalar), Some(Scalar)) => Some(Scalar),
        // per-column times per-row spans the whole tile
        (Some(Shared), Some(Scalar)) | (Some(Scalar), Some(Shared)) => Some(Row),
    }
}

fn check_idents(
    e: &Expr,
    known: &HashMap<String, Option<ValueClass>>,
    ast: &KernelAst,
) -> Result<(), FrontendError> {
    let undefined = |name: &str, span| {
        FrontendError::new(FrontendErrorKind::Undefined, span, format!("undefined identifier `{name}`"))
    };
    match &e.kind {
        ExprKind::Num(_) => Ok(()),
        ExprKind::Ident(n) => {
            if known.contains_key(n) {
                Ok(())
            } else if ast.output(n).is_some() {
                Err(FrontendError::new(
                    FrontendErrorKind::Unsupported,
                    e.span,
                    format!("output `{n}` is write-only"),
                ))
            } else {
                Err(undefined(n, e.span))
            }
        }
        ExprKind::Load(p) => {
            if ast.input(p).is_some() {
                Ok(())
            } else {
                Err(undefined(p, e.span))
            }
        }
        ExprKind::Neg(x) => check_idents(x, known, ast),
        ExprKind::Reduce { arg, .. } => check_idents(arg, known, ast),
        ExprKind::Binary(_, a, b) => {
            check_idents(a, known, ast)?;
            check_idents(b, known, ast)
        }
        ExprKind::Call(_, args) => args.iter().try_for_each(|a| check_idents(a, known, ast)),
    }
}

fn check(ast: &mut KernelAst) -> Result<(), FrontendError> {
    let mut known: HashMap<String, Option<ValueClass>> = HashMap::new();
    known.insert(COLS.into(), None);
    for c in &ast.consts {
        known.insert(c.name.clone(), None);
    }
    for p in ast.inputs.iter().chain(&ast.outputs) {
        if known.contains_key(&p.name) || ast.inputs.iter().chain(&ast.outputs).filter(|q| q.name == p.name).count() > 1 {
            return Err(parse_err(p.span, format!("duplicate name `{}`", p.name)));
        }
    }
    for p in &ast.inputs {
        if p.class == ValueClass::Scalar {
            return Err(FrontendError::new(
                FrontendErrorKind::Unsupported,
                p.span,
                "scalar parameters are only supported as outputs",
            ));
        }
        known.insert(p.name.clone(), Some(p.class));
    }
    let mut stored: HashSet<String> = HashSet::new();
    let snapshot = ast.clone();
    for s in &mut ast.stmts {
        check_idents(&s.expr, &known, &snapshot)?;
        let env: HashMap<String, ValueClass> =
            known.iter().filter_map(|(k, v)| v.map(|c| (k.clone(), c))).collect();
        let class = class_of(&s.expr, &env)?;
        if let Some(out) = snapshot.output(&s.target) {
            if !stored.insert(s.target.clone()) {
                return Err(FrontendError::new(
                    FrontendErrorKind::DuplicateStore,
                    s.span,
                    format!("output `{}` stored more than once", s.target),
                ));
            }
            let got = class.unwrap_or(ValueClass::Scalar);
            if got != out.class {
                return Err(FrontendError::new(
                    FrontendErrorKind::Unsupported,
                    s.span,
                    format!("storing a {} value into {} output `{}`", got.keyword(), out.class.keyword(), s.target),
                ));
            }
            s.kind = StmtKind::Store;
            continue;
        }
        if known.contains_key(&s.target) {
            return Err(parse_err(s.span, format!("`{}` is already defined", s.target)));
        }
        s.kind = match &s.expr.kind {
            ExprKind::Load(_) => StmtKind::Load,
            ExprKind::Reduce { .. } => StmtKind::Reduce,
            _ => StmtKind::Elementwise,
        };
        known.insert(s.target.clone(), Some(class.unwrap_or(ValueClass::Scalar)));
    }
    for p in &snapshot.outputs {
        if !stored.contains(&p.name) {
            return Err(FrontendError::new(
                FrontendErrorKind::MissingStore,
                p.span,
                format!("output `{}` is never stored", p.name),
            ));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wrap(body: &str) -> String {
        format!("kernel k(x: row<f32>) -> (y: row<f32>) {{\n{body}\n}}")
    }

    #[test]
    fn precedence_is_left_associative() {
        let ast = parse_kernel(&wrap("y = x - x / 2.0 * x;")).unwrap();
        assert_eq!(ast.stmts[0].expr.to_string(), "(x - ((x / 2.0) * x))");
    }

    #[test]
    fn classifies_statements() {
        let ast = parse_kernel(&wrap("t = load(x); m = max(t, axis=0); y = t - m;")).unwrap();
        let kinds: Vec<StmtKind> = ast.stmts.iter().map(|s| s.kind).collect();
        assert_eq!(kinds, [StmtKind::Load, StmtKind::Reduce, StmtKind::Store]);
    }

    #[test]
    fn max_with_two_args_is_elementwise() {
        let ast = parse_kernel(&wrap("y = max(x, 0.0);")).unwrap();
        assert!(matches!(ast.stmts[0].expr.kind, ExprKind::Call(Builtin::Max2, _)));
    }

    #[test]
    fn semantic_errors() {
        let kind = |src: &str| parse_kernel(&wrap(src)).unwrap_err().kind;
        assert_eq!(kind("y = z;"), FrontendErrorKind::Undefined);
        assert_eq!(kind("y = x; y = x;"), FrontendErrorKind::DuplicateStore);
        assert_eq!(kind("m = sum(x, axis=1); y = x;"), FrontendErrorKind::BadAxis);
        assert_eq!(kind("m = sum(x, axis=0); n = sum(m, axis=0); y = x;"), FrontendErrorKind::BadAxis);
        assert_eq!(kind("t = x;"), FrontendErrorKind::MissingStore);
        assert_eq!(kind("y = foo(x);"), FrontendErrorKind::Unsupported);
    }

    #[test]
    fn incomplete_expression_reports_position() {
        let err = parse_kernel("kernel k(x: row<f32>) -> (y: row<f32>) { y = x + }").unwrap_err();
        assert_eq!(err.kind, FrontendErrorKind::Parse);
        assert_eq!(err.span.line, 1);
        assert_eq!(err.span.column, 50);
    }
}
