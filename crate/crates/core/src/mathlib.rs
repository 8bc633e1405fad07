//! Fast transcendental approximations and the pass that swaps them into payloads.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::ir::{KernelProgram, Op, OpKind, UnaryOp};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MathError {
    #[error("inverse square root of non-positive value {0}")]
    Domain(String),
    #[error("Taylor degree must be at least 2, got {0}")]
    Degree(u32),
    #[error("Newton iterations must be 1 or 2, got {0}")]
    Iterations(u32),
}

pub const DEFAULT_EXP_DEGREE: u32 = 6;
pub const DEFAULT_NEWTON_ITERS: u32 = 1;

// ln 2 split so that n * LN2_HI is exact for |n| < 2^11.
#[allow(clippy::excessive_precision)]
const LN2_HI: f32 = 0.693_145_751_953_125;
#[allow(clippy::excessive_precision)]
const LN2_LO: f32 = 1.428_606_765_330_187e-6;
const LOG2_E: f32 = std::f32::consts::LOG2_E;
const EXP_OVERFLOW: f32 = 88.722_84;
const EXP_UNDERFLOW: f32 = -103.972_08;

fn inv_factorials(degree: u32) -> impl DoubleEndedIterator<Item = f32> {
    (0..=degree).map(|k| {
        let f: f64 = (1..=k).map(f64::from).product();
        (1.0 / f) as f32
    })
}

/// 2^n for n in the f32 exponent range, by building the exponent field directly.
fn pow2i(n: i32) -> f32 {
    if n < -126 {
        // subnormal results: split the scaling so each factor stays normal
        pow2i(-126) * pow2i(n + 126)
    } else {
        f32::from_bits(((n + 127) as u32) << 23)
    }
}

/// `e^x` by range reduction `x = n ln2 + eps` and a degree-`degree` Taylor
/// polynomial for `e^eps` in Horner form, scaled by `2^n`.
pub fn exp_approx_deg(x: f32, degree: u32) -> f32 {
    if x.is_nan() {
        return x;
    }
    if x > EXP_OVERFLOW {
        return f32::INFINITY;
    }
    if x < EXP_UNDERFLOW {
        return 0.0;
    }
    let n = (x * LOG2_E).round();
    let eps = (x - n * LN2_HI) - n * LN2_LO;
    let mut poly = 0.0f32;
    for c in inv_factorials(degree).rev() {
        poly = poly * eps + c;
    }
    let n = n as i32;
    if n > 127 {
        // x just below the overflow threshold with eps < 0
        return poly * pow2i(127) * pow2i(n - 127);
    }
    poly * pow2i(n)
}

/// [`exp_approx_deg`] at the default degree 6.
pub fn exp_approx(x: f32) -> f32 {
    exp_approx_deg(x, DEFAULT_EXP_DEGREE)
}

/// `tanh` through `1 - 2/(e^{2|x|} + 1)` on the approximate exp, with the odd
/// Taylor polynomial below |x| = 0.25 where the identity cancels, and ±1 past
/// |x| = 10.
pub fn tanh_approx_deg(x: f32, degree: u32) -> f32 {
    let a = x.abs();
    if a > 10.0 {
        return 1.0f32.copysign(x);
    }
    let t = if a < 0.25 {
        let a2 = a * a;
        // x - x^3/3 + 2x^5/15 - 17x^7/315
        a * (1.0 + a2 * (-1.0 / 3.0 + a2 * (2.0 / 15.0 + a2 * (-17.0 / 315.0))))
    } else {
        1.0 - 2.0 / (exp_approx_deg(2.0 * a, degree) + 1.0)
    };
    t.copysign(x)
}

pub fn tanh_approx(x: f32) -> f32 {
    tanh_approx_deg(x, DEFAULT_EXP_DEGREE)
}

/// Bit-level inverse square root estimate refined by `iters` Newton steps.
/// Callers guarantee `x > 0`.
pub fn inv_sqrt_fast_unchecked(x: f32, iters: u32) -> f32 {
    let i = 0x5f37_59df_u32.wrapping_sub(x.to_bits() >> 1);
    let mut y = f32::from_bits(i);
    let half = 0.5 * x;
    for _ in 0..iters {
        y *= 1.5 - half * y * y;
    }
    y
}

pub fn inv_sqrt_fast(x: f32, iters: u32) -> Result<f32, MathError> {
    if !(1..=2).contains(&iters) {
        return Err(MathError::Iterations(iters));
    }
    if !(x > 0.0) {
        return Err(MathError::Domain(x.to_string()));
    }
    Ok(inv_sqrt_fast_unchecked(x, iters))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MathMode {
    Exact,
    Approx,
}

/// Which payload ops get approximated and how.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ApproxPolicy {
    pub mode: MathMode,
    pub ops: BTreeSet<ApproxTarget>,
    pub exp_degree: u32,
    pub newton_iters: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum ApproxTarget {
    Exp,
    Tanh,
    Rsqrt,
}

impl ApproxPolicy {
    pub fn exact() -> Self {
        Self { mode: MathMode::Exact, ..Self::approx() }
    }

    pub fn approx() -> Self {
        Self {
            mode: MathMode::Approx,
            ops: [ApproxTarget::Exp, ApproxTarget::Tanh, ApproxTarget::Rsqrt].into_iter().collect(),
            exp_degree: DEFAULT_EXP_DEGREE,
            newton_iters: DEFAULT_NEWTON_ITERS,
        }
    }

    pub fn validate(&self) -> Result<(), MathError> {
        if self.exp_degree < 2 || self.exp_degree > u8::MAX as u32 {
            return Err(MathError::Degree(self.exp_degree));
        }
        if !(1..=2).contains(&self.newton_iters) {
            return Err(MathError::Iterations(self.newton_iters));
        }
        Ok(())
    }
}

/// Rewrites `exp`, `tanh` and `rsqrt` payload nodes to their approximations.
pub fn expand_math_ops(program: &KernelProgram, policy: &ApproxPolicy) -> Result<KernelProgram, MathError> {
    policy.validate()?;
    let mut out = program.clone();
    if policy.mode == MathMode::Exact {
        return Ok(out);
    }
    let deg = policy.exp_degree as u8;
    let iters = policy.newton_iters as u8;
    let rewrite = |op: UnaryOp| match op {
        UnaryOp::Exp if policy.ops.contains(&ApproxTarget::Exp) => UnaryOp::ExpApprox(deg),
        UnaryOp::Tanh if policy.ops.contains(&ApproxTarget::Tanh) => UnaryOp::TanhApprox(deg),
        UnaryOp::Rsqrt if policy.ops.contains(&ApproxTarget::Rsqrt) => UnaryOp::RsqrtApprox(iters),
        other => other,
    };
    fn walk(ops: &mut [Op], f: &dyn Fn(UnaryOp) -> UnaryOp) {
        for op in ops {
            if let OpKind::Generic(g) = &mut op.kind {
                for p in &mut g.payloads {
                    *p = p.map_unary(f);
                }
            }
            if let Some(body) = op.kind.body_mut() {
                walk(body, f);
            }
        }
    }
    walk(&mut out.body, &rewrite);
    out.stage = "math-approx".into();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel(a: f64, b: f64) -> f64 {
        ((a - b) / b).abs()
    }

    #[test]
    fn exp_fixed_points() {
        assert_eq!(exp_approx(0.0), 1.0);
        assert_eq!(exp_approx(std::f32::consts::LN_2), 2.0);
        assert!(rel(exp_approx(1.0) as f64, std::f64::consts::E) <= 1e-6);
    }

    #[test]
    fn exp_saturates() {
        assert_eq!(exp_approx(100.0), f32::INFINITY);
        assert_eq!(exp_approx(-200.0), 0.0);
        assert!(exp_approx(88.0).is_finite());
        assert!(exp_approx(-100.0) > 0.0);
    }

    #[test]
    fn tanh_fixed_points() {
        assert_eq!(tanh_approx(0.0), 0.0);
        assert_eq!(tanh_approx(20.0), 1.0);
        assert_eq!(tanh_approx(-20.0), -1.0);
        assert!(rel(tanh_approx(1.0) as f64, 1f64.tanh()) <= 1e-5);
    }

    #[test]
    fn inv_sqrt_checks_domain_and_iterations() {
        assert!(matches!(inv_sqrt_fast(0.0, 1), Err(MathError::Domain(_))));
        assert!(matches!(inv_sqrt_fast(-4.0, 1), Err(MathError::Domain(_))));
        assert!(matches!(inv_sqrt_fast(4.0, 3), Err(MathError::Iterations(3))));
        assert!(rel(inv_sqrt_fast(1.0, 2).unwrap() as f64, 1.0) <= 5e-6);
        assert!(rel(inv_sqrt_fast(4.0, 2).unwrap() as f64, 0.5) <= 5e-6);
        assert!(rel(inv_sqrt_fast(2.0, 1).unwrap() as f64, 0.5f64.sqrt()) <= 2e-3);
    }

    #[test]
    fn policy_validation() {
        let mut p = ApproxPolicy::approx();
        p.exp_degree = 1;
        assert_eq!(p.validate(), Err(MathError::Degree(1)));
        p.exp_degree = 6;
        p.newton_iters = 0;
        assert_eq!(p.validate(), Err(MathError::Iterations(0)));
    }
}
