//! Scalar payload expressions evaluated at every point of a generic's domain.

use std::fmt;

use crate::mathlib;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum UnaryOp {
    Neg,
    Exp,
    Tanh,
    Sqrt,
    Rsqrt,
    /// Range-reduced Taylor exp of the given degree.
    ExpApprox(u8),
    /// `1 - 2/(e^{2x}+1)` over the approximate exp of the given degree.
    TanhApprox(u8),
    /// Bit-trick inverse square root refined by this many Newton steps.
    RsqrtApprox(u8),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
    Max,
}

/// Expression tree over block arguments. Block argument `i` is the scalar read
/// from input operand `i`.
#[derive(Clone, Debug, PartialEq)]
pub enum PayloadExpr {
    Arg(usize),
    Const(f32),
    Unary(UnaryOp, Box<PayloadExpr>),
    Binary(BinaryOp, Box<PayloadExpr>, Box<PayloadExpr>),
}

/// Two-operand max shared by payloads and max-reductions.
#[inline]
pub fn max2(a: f32, b: f32) -> f32 {
    a.max(b)
}

impl UnaryOp {
    #[inline]
    pub fn apply(self, x: f32) -> f32 {
        match self {
            UnaryOp::Neg => -x,
            UnaryOp::Exp => x.exp(),
            UnaryOp::Tanh => x.tanh(),
            UnaryOp::Sqrt => x.sqrt(),
            UnaryOp::Rsqrt => 1.0 / x.sqrt(),
            UnaryOp::ExpApprox(d) => mathlib::exp_approx_deg(x, d as u32),
            UnaryOp::TanhApprox(d) => mathlib::tanh_approx_deg(x, d as u32),
            UnaryOp::RsqrtApprox(n) => mathlib::inv_sqrt_fast_unchecked(x, n as u32),
        }
    }

    pub fn name(self) -> String {
        match self {
            UnaryOp::Neg => "neg".into(),
            UnaryOp::Exp => "exp".into(),
            UnaryOp::Tanh => "tanh".into(),
            UnaryOp::Sqrt => "sqrt".into(),
            UnaryOp::Rsqrt => "rsqrt".into(),
            UnaryOp::ExpApprox(d) => format!("exp_approx<{d}>"),
            UnaryOp::TanhApprox(d) => format!("tanh_approx<{d}>"),
            UnaryOp::RsqrtApprox(n) => format!("rsqrt_approx<{n}>"),
        }
    }
}

impl BinaryOp {
    #[inline]
    pub fn apply(self, a: f32, b: f32) -> f32 {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
            BinaryOp::Div => a / b,
            BinaryOp::Max => max2(a, b),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
            BinaryOp::Div => "div",
            BinaryOp::Max => "max2",
        }
    }
}

impl PayloadExpr {
    pub fn arg(i: usize) -> Self {
        PayloadExpr::Arg(i)
    }

    pub fn unary(op: UnaryOp, x: PayloadExpr) -> Self {
        PayloadExpr::Unary(op, Box::new(x))
    }

    pub fn binary(op: BinaryOp, a: PayloadExpr, b: PayloadExpr) -> Self {
        PayloadExpr::Binary(op, Box::new(a), Box::new(b))
    }

    pub fn eval(&self, args: &[f32]) -> f32 {
        match self {
            PayloadExpr::Arg(i) => args[*i],
            PayloadExpr::Const(c) => *c,
            PayloadExpr::Unary(op, x) => op.apply(x.eval(args)),
            PayloadExpr::Binary(op, a, b) => op.apply(a.eval(args), b.eval(args)),
        }
    }

    /// One past the highest block argument referenced.
    pub fn arg_bound(&self) -> usize {
        match self {
            PayloadExpr::Arg(i) => i + 1,
            PayloadExpr::Const(_) => 0,
            PayloadExpr::Unary(_, x) => x.arg_bound(),
            PayloadExpr::Binary(_, a, b) => a.arg_bound().max(b.arg_bound()),
        }
    }

    pub fn uses_arg(&self, i: usize) -> bool {
        match self {
            PayloadExpr::Arg(j) => *j == i,
            PayloadExpr::Const(_) => false,
            PayloadExpr::Unary(_, x) => x.uses_arg(i),
            PayloadExpr::Binary(_, a, b) => a.uses_arg(i) || b.uses_arg(i),
        }
    }

    /// Replaces each `Arg(i)` by `f(i)`.
    pub fn substitute_args(&self, f: &dyn Fn(usize) -> PayloadExpr) -> PayloadExpr {
        match self {
            PayloadExpr::Arg(i) => f(*i),
            PayloadExpr::Const(c) => PayloadExpr::Const(*c),
            PayloadExpr::Unary(op, x) => PayloadExpr::unary(*op, x.substitute_args(f)),
            PayloadExpr::Binary(op, a, b) => {
                PayloadExpr::binary(*op, a.substitute_args(f), b.substitute_args(f))
            }
        }
    }

    pub fn map_unary(&self, f: &dyn Fn(UnaryOp) -> UnaryOp) -> PayloadExpr {
        match self {
            PayloadExpr::Arg(_) | PayloadExpr::Const(_) => self.clone(),
            PayloadExpr::Unary(op, x) => PayloadExpr::unary(f(*op), x.map_unary(f)),
            PayloadExpr::Binary(op, a, b) => PayloadExpr::binary(*op, a.map_unary(f), b.map_unary(f)),
        }
    }

    /// Visits every node in pre-order.
    pub fn visit(&self, f: &mut dyn FnMut(&PayloadExpr)) {
        f(self);
        match self {
            PayloadExpr::Arg(_) | PayloadExpr::Const(_) => {}
            PayloadExpr::Unary(_, x) => x.visit(f),
            PayloadExpr::Binary(_, a, b) => {
                a.visit(f);
                b.visit(f);
            }
        }
    }

    pub fn node_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_| n += 1);
        n
    }
}

impl fmt::Display for PayloadExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PayloadExpr::Arg(i) => write!(f, "%a{i}"),
            PayloadExpr::Const(c) => write!(f, "{c:?}"),
            PayloadExpr::Unary(op, x) => write!(f, "{}({x})", op.name()),
            PayloadExpr::Binary(op, a, b) => write!(f, "{}({a}, {b})", op.name()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn substitution_splices_producer() {
        // consumer exp(%a0) with %a0 := sub(%a0, %a1)
        let consumer = PayloadExpr::unary(UnaryOp::Exp, PayloadExpr::arg(0));
        let producer = PayloadExpr::binary(BinaryOp::Sub, PayloadExpr::arg(0), PayloadExpr::arg(1));
        let fused = consumer.substitute_args(&|_| producer.clone());
        assert_eq!(fused.to_string(), "exp(sub(%a0, %a1))");
        assert_eq!(fused.eval(&[3.0, 1.0]), 2.0f32.exp());
        assert_eq!(fused.arg_bound(), 2);
    }

    #[test]
    fn constants_print_round_trippable() {
        let e = PayloadExpr::binary(BinaryOp::Mul, PayloadExpr::Const(0.044715), PayloadExpr::arg(0));
        assert_eq!(e.to_string(), "mul(0.044715, %a0)");
    }
}
