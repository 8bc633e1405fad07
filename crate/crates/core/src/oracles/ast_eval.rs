//! Direct evaluation of a checked kernel AST, without lowering.

use std::collections::HashMap;

use crate::frontend::{BinOp, Builtin, Expr, ExprKind, KernelAst, ReduceOp, RowShape, ValueClass, COLS};
use crate::interp::{NamedTensors, TensorValue};

use super::OracleError;

/// Arithmetic the evaluator runs in. `f32` follows the interpreter's
/// per-operation rounding; `f64` rounds once at the end.
pub trait Real: Copy + std::ops::Add<Output = Self> + std::ops::Sub<Output = Self> + std::ops::Mul<Output = Self> + std::ops::Div<Output = Self> + std::ops::Neg<Output = Self> {
    const ZERO: Self;
    const NEG_INF: Self;
    fn from_f32(v: f32) -> Self;
    fn to_f32(self) -> f32;
    fn exp(self) -> Self;
    fn tanh(self) -> Self;
    fn sqrt(self) -> Self;
    fn max(self, o: Self) -> Self;
}

impl Real for f32 {
    const ZERO: Self = 0.0;
    const NEG_INF: Self = f32::NEG_INFINITY;
    fn from_f32(v: f32) -> Self {
        v
    }
    fn to_f32(self) -> f32 {
        self
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
    fn tanh(self) -> Self {
        f32::tanh(self)
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    fn max(self, o: Self) -> Self {
        f32::max(self, o)
    }
}

impl Real for f64 {
    const ZERO: Self = 0.0;
    const NEG_INF: Self = f64::NEG_INFINITY;
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    fn to_f32(self) -> f32 {
        self as f32
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn max(self, o: Self) -> Self {
        f64::max(self, o)
    }
}

struct Value<T> {
    class: ValueClass,
    data: Vec<T>,
}

struct Eval<'a, T> {
    ast: &'a KernelAst,
    cols: usize,
    env: HashMap<String, Value<T>>,
    /// Reductions keyed by expression address and row.
    reduced: HashMap<(*const Expr, usize), T>,
}

impl<T: Real> Eval<'_, T> {
    fn lookup(&self, name: &str, r: usize, c: usize) -> Result<T, OracleError> {
        if name == COLS {
            return Ok(T::from_f32(self.cols as f32));
        }
        if let Some(v) = self.ast.const_value(name) {
            return Ok(T::from_f32(v));
        }
        let v = self.env.get(name).ok_or_else(|| OracleError::MissingInput(name.into()))?;
        Ok(match v.class {
            ValueClass::Row => v.data[r * self.cols + c],
            ValueClass::Scalar => v.data[r],
            ValueClass::Shared => v.data[c],
        })
    }

    fn at(&mut self, e: &Expr, r: usize, c: usize) -> Result<T, OracleError> {
        Ok(match &e.kind {
            ExprKind::Num(v) => T::from_f32(*v),
            ExprKind::Ident(n) | ExprKind::Load(n) => self.lookup(n, r, c)?,
            ExprKind::Neg(x) => -self.at(x, r, c)?,
            ExprKind::Binary(op, a, b) => {
                let (a, b) = (self.at(a, r, c)?, self.at(b, r, c)?);
                match op {
                    BinOp::Add => a + b,
                    BinOp::Sub => a - b,
                    BinOp::Mul => a * b,
                    BinOp::Div => a / b,
                }
            }
            ExprKind::Call(f, args) => {
                let x = self.at(&args[0], r, c)?;
                match f {
                    Builtin::Exp => x.exp(),
                    Builtin::Tanh => x.tanh(),
                    Builtin::Sqrt => x.sqrt(),
                    Builtin::Rsqrt => T::from_f32(1.0) / x.sqrt(),
                    Builtin::Max2 => x.max(self.at(&args[1], r, c)?),
                }
            }
            ExprKind::Reduce { op, arg, .. } => {
                let key = (e as *const Expr, r);
                if let Some(v) = self.reduced.get(&key) {
                    return Ok(*v);
                }
                let mut acc = match op {
                    ReduceOp::Sum => T::ZERO,
                    ReduceOp::Max => T::NEG_INF,
                };
                for k in 0..self.cols {
                    let v = self.at(arg, r, k)?;
                    acc = match op {
                        ReduceOp::Sum => acc + v,
                        ReduceOp::Max => acc.max(v),
                    };
                }
                self.reduced.insert(key, acc);
                acc
            }
        })
    }
}

fn class_of_expr(ast: &KernelAst, classes: &HashMap<String, ValueClass>, e: &Expr) -> Option<ValueClass> {
    let join = |a: Option<ValueClass>, b: Option<ValueClass>| match (a, b) {
        (Some(ValueClass::Row), _) | (_, Some(ValueClass::Row)) => Some(ValueClass::Row),
        (Some(ValueClass::Scalar), Some(ValueClass::Shared)) | (Some(ValueClass::Shared), Some(ValueClass::Scalar)) => {
            Some(ValueClass::Row)
        }
        (x, None) | (None, x) => x,
        (x, _) => x,
    };
    match &e.kind {
        ExprKind::Num(_) => None,
        ExprKind::Ident(n) | ExprKind::Load(n) => {
            if n == COLS || ast.const_value(n).is_some() {
                None
            } else {
                classes.get(n).copied()
            }
        }
        ExprKind::Neg(x) => class_of_expr(ast, classes, x),
        ExprKind::Binary(_, a, b) => join(class_of_expr(ast, classes, a), class_of_expr(ast, classes, b)),
        ExprKind::Call(_, args) => args.iter().fold(None, |acc, a| join(acc, class_of_expr(ast, classes, a))),
        ExprKind::Reduce { .. } => Some(ValueClass::Scalar),
    }
}

/// Runs every statement of `ast` point by point over `shape`. Row reductions
/// accumulate left to right from the identity, like the lowered generics.
pub fn eval_ast<T: Real>(ast: &KernelAst, shape: RowShape, inputs: &NamedTensors) -> Result<NamedTensors, OracleError> {
    let rows = shape.rows.unwrap_or(1);
    let cols = shape.cols;
    let mut ev = Eval::<T> { ast, cols, env: HashMap::new(), reduced: HashMap::new() };
    let mut classes = HashMap::new();
    for p in &ast.inputs {
        let t = inputs.get(&p.name).ok_or_else(|| OracleError::MissingInput(p.name.clone()))?;
        let want = shape.shape_of(p.class);
        if t.shape != want {
            return Err(OracleError::Shape(format!("{}: expected {want:?}, got {:?}", p.name, t.shape)));
        }
        classes.insert(p.name.clone(), p.class);
        ev.env.insert(p.name.clone(), Value { class: p.class, data: t.data.iter().map(|&v| T::from_f32(v)).collect() });
    }
    for s in &ast.stmts {
        let class = ast
            .output(&s.target)
            .map(|p| p.class)
            .or_else(|| class_of_expr(ast, &classes, &s.expr))
            .unwrap_or(ValueClass::Row);
        let (nr, nc) = match class {
            ValueClass::Row => (rows, cols),
            ValueClass::Scalar => (rows, 1),
            ValueClass::Shared => (1, cols),
        };
        let mut data = Vec::with_capacity(nr * nc);
        for r in 0..nr {
            for c in 0..nc {
                data.push(ev.at(&s.expr, r, c)?);
            }
        }
        classes.insert(s.target.clone(), class);
        ev.env.insert(s.target.clone(), Value { class, data });
    }
    let mut out = NamedTensors::new();
    for p in &ast.outputs {
        let v = ev.env.get(&p.name).ok_or_else(|| OracleError::MissingInput(p.name.clone()))?;
        out.insert(
            p.name.clone(),
            TensorValue { shape: shape.shape_of(p.class), data: v.data.iter().map(|x| x.to_f32()).collect() },
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::parse_kernel;

    #[test]
    fn softmax_f64_matches_frozen_values() {
        let ast = parse_kernel(crate::shipped::get("softmax").unwrap().source).unwrap();
        let x = TensorValue { shape: vec![3], data: vec![1.0, 2.0, 3.0] };
        let out = eval_ast::<f64>(&ast, RowShape::one_d(3), &[("x".to_string(), x)].into_iter().collect()).unwrap();
        assert_eq!(out["out"].data, vec![0.09003057, 0.24472847, 0.66524096]);
    }

    #[test]
    fn shared_and_scalar_broadcast() {
        let ast = parse_kernel("kernel k(x: row<f32>, g: shared<f32>) -> (y: row<f32>) { s = sum(x, axis=0); y = s * g; }")
            .unwrap();
        let x = TensorValue { shape: vec![2, 2], data: vec![1.0, 2.0, 3.0, 4.0] };
        let g = TensorValue { shape: vec![2], data: vec![10.0, 100.0] };
        let inputs = [("x".to_string(), x), ("g".to_string(), g)].into_iter().collect();
        let out = eval_ast::<f32>(&ast, RowShape::two_d(2, 2), &inputs).unwrap();
        assert_eq!(out["y"].data, vec![30.0, 300.0, 70.0, 700.0]);
    }
}
