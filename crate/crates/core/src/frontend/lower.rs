use std::collections::HashMap;

use super::ast::*;
use super::parser::{class_of, COLS};
use super::{FrontendError, FrontendErrorKind};
use crate::ir::{
    AffineIndexMap, BinaryOp, ElemType, GenericOp, IndexExpr, IteratorKind, KernelProgram, MemSpace, OpKind,
    PayloadExpr, ReductionKind, Role, UnaryOp, Val,
};

/// Concrete problem size: `rows = None` lowers a 1-D program over one row.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RowShape {
    pub rows: Option<usize>,
    pub cols: usize,
}

impl RowShape {
    pub fn one_d(cols: usize) -> Self {
        Self { rows: None, cols }
    }

    pub fn two_d(rows: usize, cols: usize) -> Self {
        Self { rows: Some(rows), cols }
    }

    pub fn shape_of(&self, class: ValueClass) -> Vec<usize> {
        match (class, self.rows) {
            (ValueClass::Row, Some(r)) => vec![r, self.cols],
            (ValueClass::Row, None) | (ValueClass::Shared, _) => vec![self.cols],
            (ValueClass::Scalar, Some(r)) => vec![r, 1],
            (ValueClass::Scalar, None) => vec![1],
        }
    }

    pub fn elements(&self) -> usize {
        self.rows.unwrap_or(1) * self.cols
    }
}

#[derive(Clone, Copy)]
struct Binding {
    val: Val,
    class: ValueClass,
    elem: ElemType,
}

/// Iteration space of one lowered statement.
#[derive(Clone, Copy, PartialEq, Eq)]
enum Space {
    Row,
    Scalar,
    Shared,
    /// Row space whose column dimension is reduced.
    Reduce,
}

struct Lowerer<'a> {
    ast: &'a KernelAst,
    shape: RowShape,
    prog: KernelProgram,
    env: HashMap<String, Binding>,
}

impl Lowerer<'_> {
    fn two_d(&self) -> bool {
        self.shape.rows.is_some()
    }

    fn domain(&self, space: Space) -> (Vec<IndexExpr>, Vec<IteratorKind>) {
        use IteratorKind::*;
        let c = self.shape.cols as i64;
        match (space, self.shape.rows) {
            (Space::Row, Some(r)) => (vec![r as i64, c].into_iter().map(Into::into).collect(), vec![Parallel; 2]),
            (Space::Reduce, Some(r)) => (vec![(r as i64).into(), c.into()], vec![Parallel, Reduction]),
            (Space::Scalar, Some(r)) => (vec![(r as i64).into(), 1.into()], vec![Parallel; 2]),
            (Space::Row | Space::Shared, None) | (Space::Shared, Some(_)) => (vec![c.into()], vec![Parallel]),
            (Space::Reduce, None) => (vec![c.into()], vec![Reduction]),
            (Space::Scalar, None) => (vec![1.into()], vec![Parallel]),
        }
    }

    fn input_map(&self, class: ValueClass, space: Space) -> AffineIndexMap {
        let two = self.two_d();
        match (space, class) {
            (Space::Row | Space::Reduce, ValueClass::Row) | (Space::Scalar, ValueClass::Scalar) => {
                AffineIndexMap::identity(if two { 2 } else { 1 })
            }
            (Space::Row | Space::Reduce, ValueClass::Scalar) => {
                AffineIndexMap::new(if two { vec![Some(0), None] } else { vec![None] })
            }
            (Space::Row | Space::Reduce, ValueClass::Shared) => {
                AffineIndexMap::new(vec![Some(if two { 1 } else { 0 })])
            }
            (Space::Shared, ValueClass::Shared) => AffineIndexMap::identity(1),
            _ => unreachable!("class checker admits no other combination"),
        }
    }

    fn output_map(&self, space: Space) -> AffineIndexMap {
        match space {
            Space::Reduce if self.two_d() => AffineIndexMap::new(vec![Some(0), None]),
            Space::Reduce => AffineIndexMap::new(vec![None]),
            Space::Shared => AffineIndexMap::identity(1),
            _ => AffineIndexMap::identity(self.domain(space).0.len()),
        }
    }

    fn classes(&self) -> HashMap<String, ValueClass> {
        self.env.iter().map(|(k, b)| (k.clone(), b.class)).collect()
    }

    /// Lowers nested reductions into temporaries, then builds the payload of
    /// `e` over the collected input operands.
    fn payload(
        &mut self,
        e: &Expr,
        target: &str,
        inputs: &mut Vec<Binding>,
        counter: &mut usize,
    ) -> Result<PayloadExpr, FrontendError> {
        let arg = |b: Binding, inputs: &mut Vec<Binding>| {
            let i = inputs.iter().position(|x| x.val == b.val).unwrap_or_else(|| {
                inputs.push(b);
                inputs.len() - 1
            });
            PayloadExpr::Arg(i)
        };
        Ok(match &e.kind {
            ExprKind::Num(v) => PayloadExpr::Const(*v),
            ExprKind::Ident(n) | ExprKind::Load(n) => {
                if let Some(b) = self.env.get(n) {
                    arg(*b, inputs)
                } else if n == COLS {
                    PayloadExpr::Const(self.shape.cols as f32)
                } else {
                    PayloadExpr::Const(self.ast.const_value(n).expect("checker resolved identifier"))
                }
            }
            ExprKind::Neg(x) => PayloadExpr::unary(UnaryOp::Neg, self.payload(x, target, inputs, counter)?),
            ExprKind::Binary(op, a, b) => {
                let op = match op {
                    BinOp::Add => BinaryOp::Add,
                    BinOp::Sub => BinaryOp::Sub,
                    BinOp::Mul => BinaryOp::Mul,
                    BinOp::Div => BinaryOp::Div,
                };
                let a = self.payload(a, target, inputs, counter)?;
                let b = self.payload(b, target, inputs, counter)?;
                PayloadExpr::binary(op, a, b)
            }
            ExprKind::Call(f, args) => {
                let mut ps = Vec::new();
                for a in args {
                    ps.push(self.payload(a, target, inputs, counter)?);
                }
                let un = match f {
                    Builtin::Exp => UnaryOp::Exp,
                    Builtin::Tanh => UnaryOp::Tanh,
                    Builtin::Sqrt => UnaryOp::Sqrt,
                    Builtin::Rsqrt => UnaryOp::Rsqrt,
                    Builtin::Max2 => {
                        let b = ps.pop().unwrap();
                        let a = ps.pop().unwrap();
                        return Ok(PayloadExpr::binary(BinaryOp::Max, a, b));
                    }
                };
                PayloadExpr::unary(un, ps.pop().unwrap())
            }
            ExprKind::Reduce { op, .. } => {
                *counter += 1;
                let name = format!("{target}_{}{counter}", op.name());
                let b = self.reduction(e, &name, None)?;
                arg(b, inputs)
            }
        })
    }

    fn elem_of(inputs: &[Binding]) -> ElemType {
        if inputs.iter().any(|b| b.elem.is_narrow()) {
            ElemType::F16
        } else {
            ElemType::F32
        }
    }

    fn emit(
        &mut self,
        space: Space,
        inputs: Vec<Binding>,
        out: Val,
        payload: PayloadExpr,
        reduction: Option<ReductionKind>,
    ) {
        let (domain, iterators) = self.domain(space);
        let mut maps: Vec<AffineIndexMap> = inputs.iter().map(|b| self.input_map(b.class, space)).collect();
        maps.push(self.output_map(space));
        let g = GenericOp {
            domain,
            iterators,
            inputs: inputs.iter().map(|b| b.val).collect(),
            outputs: vec![out],
            maps,
            payloads: vec![payload],
            reductions: vec![reduction],
        };
        let op = self.prog.op(OpKind::Generic(g));
        self.prog.body.push(op);
    }

    fn temp(&mut self, name: &str, class: ValueClass, elem: ElemType) -> Binding {
        let val = self.prog.add_tensor(name, self.shape.shape_of(class), elem, MemSpace::Ddr, Role::Temp);
        Binding { val, class, elem }
    }

    /// Lowers a `Reduce` expression into one reduction generic. Writes into
    /// `dest` when given, else into a fresh temporary named `name`.
    fn reduction(&mut self, e: &Expr, name: &str, dest: Option<Binding>) -> Result<Binding, FrontendError> {
        let ExprKind::Reduce { op, arg, .. } = &e.kind else { unreachable!() };
        let mut inputs = Vec::new();
        let mut counter = 0;
        let payload = self.payload(arg, name, &mut inputs, &mut counter)?;
        let out = match dest {
            Some(d) => d,
            None => {
                let elem = Self::elem_of(&inputs);
                self.temp(name, ValueClass::Scalar, elem)
            }
        };
        let kind = match op {
            ReduceOp::Sum => ReductionKind::Sum,
            ReduceOp::Max => ReductionKind::Max,
        };
        self.emit(Space::Reduce, inputs, out.val, payload, Some(kind));
        Ok(out)
    }

    fn stmt(&mut self, s: &Stmt) -> Result<(), FrontendError> {
        let class = class_of(&s.expr, &self.classes())?.unwrap_or(ValueClass::Scalar);
        let dest = match s.kind {
            StmtKind::Load => {
                let ExprKind::Load(p) = &s.expr.kind else { unreachable!() };
                let b = self.env[p];
                self.env.insert(s.target.clone(), b);
                return Ok(());
            }
            StmtKind::Store => {
                let out = self.ast.output(&s.target).expect("checker matched output");
                let val = self.prog.decl_by_name(&out.name).expect("output declared").id;
                Some(Binding { val, class: out.class, elem: out.elem })
            }
            _ => None,
        };
        if let ExprKind::Reduce { .. } = s.expr.kind {
            let b = self.reduction(&s.expr, &s.target, dest)?;
            self.env.insert(s.target.clone(), b);
            return Ok(());
        }
        let mut inputs = Vec::new();
        let mut counter = 0;
        let payload = self.payload(&s.expr, &s.target, &mut inputs, &mut counter)?;
        let out = match dest {
            Some(d) => d,
            None => {
                let elem = Self::elem_of(&inputs);
                self.temp(&s.target, class, elem)
            }
        };
        let space = match class {
            ValueClass::Row => Space::Row,
            ValueClass::Scalar => Space::Scalar,
            ValueClass::Shared => Space::Shared,
        };
        self.emit(space, inputs, out.val, payload, None);
        if s.kind != StmtKind::Store {
            self.env.insert(s.target.clone(), out);
        }
        Ok(())
    }
}

/// Lowers a checked AST to one generic per elementwise statement and per
/// reduction, for the given problem size.
pub fn lower_to_generics(ast: &KernelAst, shape: RowShape) -> Result<KernelProgram, FrontendError> {
    if shape.cols == 0 || shape.rows == Some(0) {
        return Err(FrontendError::new(
            FrontendErrorKind::Unsupported,
            SourceSpan::default(),
            "problem size must be non-empty",
        ));
    }
    let mut l = Lowerer { ast, shape, prog: KernelProgram::new(&ast.name), env: HashMap::new() };
    for p in &ast.inputs {
        let val = l.prog.add_tensor(&p.name, shape.shape_of(p.class), p.elem, MemSpace::Ddr, Role::Input);
        l.env.insert(p.name.clone(), Binding { val, class: p.class, elem: p.elem });
    }
    for p in &ast.outputs {
        l.prog.add_tensor(&p.name, shape.shape_of(p.class), p.elem, MemSpace::Ddr, Role::Output);
    }
    for s in &ast.stmts {
        l.stmt(s)?;
    }
    Ok(l.prog)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::parse_kernel;
    use crate::ir::verify;

    #[test]
    fn single_add_is_one_identity_generic() {
        let ast = parse_kernel("kernel add(a: row<f32>, b: row<f32>) -> (out: row<f32>) { out = a + b; }").unwrap();
        let p = lower_to_generics(&ast, RowShape::two_d(4, 8)).unwrap();
        assert!(verify(&p, None).is_ok());
        assert_eq!(p.body.len(), 1);
        let g = p.body[0].as_generic().unwrap();
        assert!(g.maps.iter().all(|m| m.is_identity(2)));
    }

    #[test]
    fn reduced_scalar_feeds_row_through_broadcast_map() {
        let src = "kernel k(x: row<f32>) -> (y: row<f32>) { y = x - max(x, axis=0); }";
        let p = lower_to_generics(&parse_kernel(src).unwrap(), RowShape::two_d(3, 5)).unwrap();
        assert!(verify(&p, None).is_ok(), "{}", verify(&p, None));
        assert_eq!(p.body.len(), 2);
        let red = p.body[0].as_generic().unwrap();
        assert_eq!(red.iterators, [IteratorKind::Parallel, IteratorKind::Reduction]);
        assert_eq!(red.output_map(0).results, [Some(0), None]);
        let sub = p.body[1].as_generic().unwrap();
        assert_eq!(sub.input_map(1).results, [Some(0), None]);
    }

    #[test]
    fn shared_param_maps_to_column_dim() {
        let src = "kernel k(x: row<f32>, g: shared<f32>) -> (y: row<f32>) { y = x * g; }";
        let p = lower_to_generics(&parse_kernel(src).unwrap(), RowShape::two_d(2, 6)).unwrap();
        assert!(verify(&p, None).is_ok());
        assert_eq!(p.decl_by_name("g").unwrap().shape, [6]);
        assert_eq!(p.body[0].as_generic().unwrap().input_map(1).results, [Some(1)]);
    }
}
