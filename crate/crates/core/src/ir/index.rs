//! Integer index expressions used for loop bounds, slice offsets and sizes.

use std::fmt;

use super::{Val, Var};

/// Integer expression over loop variables and runtime view extents.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum IndexExpr {
    Const(i64),
    Var(Var),
    /// Extent of axis `usize` of a view value.
    DimOf(Val, usize),
    Add(Box<IndexExpr>, Box<IndexExpr>),
    Sub(Box<IndexExpr>, Box<IndexExpr>),
    Mul(Box<IndexExpr>, Box<IndexExpr>),
    Min(Box<IndexExpr>, Box<IndexExpr>),
    FloorDiv(Box<IndexExpr>, Box<IndexExpr>),
    CeilDiv(Box<IndexExpr>, Box<IndexExpr>),
    Mod(Box<IndexExpr>, Box<IndexExpr>),
}

impl From<i64> for IndexExpr {
    fn from(v: i64) -> Self {
        IndexExpr::Const(v)
    }
}

impl From<Var> for IndexExpr {
    fn from(v: Var) -> Self {
        IndexExpr::Var(v)
    }
}

macro_rules! folding_ctor {
    ($name:ident, $variant:ident, $fold:expr) => {
        pub fn $name(a: impl Into<IndexExpr>, b: impl Into<IndexExpr>) -> IndexExpr {
            let (a, b) = (a.into(), b.into());
            if let (IndexExpr::Const(x), IndexExpr::Const(y)) = (&a, &b) {
                let f: fn(i64, i64) -> Option<i64> = $fold;
                if let Some(v) = f(*x, *y) {
                    return IndexExpr::Const(v);
                }
            }
            IndexExpr::$variant(Box::new(a), Box::new(b))
        }
    };
}

impl IndexExpr {
    pub fn constant(&self) -> Option<i64> {
        match self {
            IndexExpr::Const(c) => Some(*c),
            _ => None,
        }
    }

    pub fn add(a: impl Into<IndexExpr>, b: impl Into<IndexExpr>) -> IndexExpr {
        let (a, b) = (a.into(), b.into());
        match (&a, &b) {
            (IndexExpr::Const(x), IndexExpr::Const(y)) => IndexExpr::Const(x + y),
            (IndexExpr::Const(0), _) => b,
            (_, IndexExpr::Const(0)) => a,
            _ => IndexExpr::Add(Box::new(a), Box::new(b)),
        }
    }

    pub fn sub(a: impl Into<IndexExpr>, b: impl Into<IndexExpr>) -> IndexExpr {
        let (a, b) = (a.into(), b.into());
        match (&a, &b) {
            (IndexExpr::Const(x), IndexExpr::Const(y)) => IndexExpr::Const(x - y),
            (_, IndexExpr::Const(0)) => a,
            _ => IndexExpr::Sub(Box::new(a), Box::new(b)),
        }
    }

    pub fn mul(a: impl Into<IndexExpr>, b: impl Into<IndexExpr>) -> IndexExpr {
        let (a, b) = (a.into(), b.into());
        match (&a, &b) {
            (IndexExpr::Const(x), IndexExpr::Const(y)) => IndexExpr::Const(x * y),
            (IndexExpr::Const(0), _) | (_, IndexExpr::Const(0)) => IndexExpr::Const(0),
            (IndexExpr::Const(1), _) => b,
            (_, IndexExpr::Const(1)) => a,
            _ => IndexExpr::Mul(Box::new(a), Box::new(b)),
        }
    }

    folding_ctor!(min, Min, |x, y| Some(x.min(y)));
    folding_ctor!(floor_div, FloorDiv, |x, y| (y > 0).then(|| x.div_euclid(y)));
    folding_ctor!(ceil_div, CeilDiv, |x, y| (y > 0).then(|| (x + y - 1).div_euclid(y)));
    folding_ctor!(modulo, Mod, |x, y| (y > 0).then(|| x.rem_euclid(y)));

    /// Evaluates the expression. `dim` resolves `DimOf` terms.
    pub fn eval(
        &self,
        var: &dyn Fn(Var) -> Option<i64>,
        dim: &dyn Fn(Val, usize) -> Option<i64>,
    ) -> Result<i64, IndexEvalError> {
        Ok(match self {
            IndexExpr::Const(c) => *c,
            IndexExpr::Var(v) => var(*v).ok_or(IndexEvalError::UnboundVar(*v))?,
            IndexExpr::DimOf(v, axis) => dim(*v, *axis).ok_or(IndexEvalError::UnknownDim(*v, *axis))?,
            IndexExpr::Add(a, b) => a.eval(var, dim)? + b.eval(var, dim)?,
            IndexExpr::Sub(a, b) => a.eval(var, dim)? - b.eval(var, dim)?,
            IndexExpr::Mul(a, b) => a.eval(var, dim)? * b.eval(var, dim)?,
            IndexExpr::Min(a, b) => a.eval(var, dim)?.min(b.eval(var, dim)?),
            IndexExpr::FloorDiv(a, b) | IndexExpr::CeilDiv(a, b) | IndexExpr::Mod(a, b) => {
                let (x, y) = (a.eval(var, dim)?, b.eval(var, dim)?);
                if y <= 0 {
                    return Err(IndexEvalError::NonPositiveDivisor);
                }
                match self {
                    IndexExpr::FloorDiv(..) => x.div_euclid(y),
                    IndexExpr::CeilDiv(..) => (x + y - 1).div_euclid(y),
                    _ => x.rem_euclid(y),
                }
            }
        })
    }

    /// Conservative interval `[lo, hi]` of the expression given intervals for
    /// variables and view extents.
    pub fn bounds(
        &self,
        var: &dyn Fn(Var) -> Option<(i64, i64)>,
        dim: &dyn Fn(Val, usize) -> Option<(i64, i64)>,
    ) -> Option<(i64, i64)> {
        fn corners(a: (i64, i64), b: (i64, i64), f: impl Fn(i64, i64) -> i64) -> (i64, i64) {
            let c = [f(a.0, b.0), f(a.0, b.1), f(a.1, b.0), f(a.1, b.1)];
            (*c.iter().min().unwrap(), *c.iter().max().unwrap())
        }
        Some(match self {
            IndexExpr::Const(c) => (*c, *c),
            IndexExpr::Var(v) => var(*v)?,
            IndexExpr::DimOf(v, axis) => dim(*v, *axis)?,
            IndexExpr::Add(a, b) => {
                let (x, y) = (a.bounds(var, dim)?, b.bounds(var, dim)?);
                (x.0 + y.0, x.1 + y.1)
            }
            IndexExpr::Sub(a, b) => {
                let (x, y) = (a.bounds(var, dim)?, b.bounds(var, dim)?);
                (x.0 - y.1, x.1 - y.0)
            }
            IndexExpr::Mul(a, b) => corners(a.bounds(var, dim)?, b.bounds(var, dim)?, |p, q| p * q),
            IndexExpr::Min(a, b) => {
                let (x, y) = (a.bounds(var, dim)?, b.bounds(var, dim)?);
                (x.0.min(y.0), x.1.min(y.1))
            }
            IndexExpr::FloorDiv(a, b) | IndexExpr::CeilDiv(a, b) => {
                let (x, y) = (a.bounds(var, dim)?, b.bounds(var, dim)?);
                if y.0 <= 0 {
                    return None;
                }
                if matches!(self, IndexExpr::FloorDiv(..)) {
                    corners(x, y, i64::div_euclid)
                } else {
                    corners(x, y, |p, q| (p + q - 1).div_euclid(q))
                }
            }
            IndexExpr::Mod(a, b) => {
                let y = b.bounds(var, dim)?;
                if y.0 <= 0 {
                    return None;
                }
                let x = a.bounds(var, dim)?;
                if x.0 >= 0 && x.1 < y.0 {
                    x
                } else {
                    (0, y.1 - 1)
                }
            }
        })
    }

    /// Replaces every occurrence of `var` with `with`.
    pub fn substitute_var(&self, var: Var, with: &IndexExpr) -> IndexExpr {
        self.rewrite(&|e| match e {
            IndexExpr::Var(v) if *v == var => Some(with.clone()),
            _ => None,
        })
    }

    /// Renames loop variables and values through the given maps.
    pub fn remap(&self, var: &dyn Fn(Var) -> Var, val: &dyn Fn(Val) -> Val) -> IndexExpr {
        self.rewrite(&|e| match e {
            IndexExpr::Var(v) => Some(IndexExpr::Var(var(*v))),
            IndexExpr::DimOf(v, axis) => Some(IndexExpr::DimOf(val(*v), *axis)),
            _ => None,
        })
    }

    fn rewrite(&self, f: &dyn Fn(&IndexExpr) -> Option<IndexExpr>) -> IndexExpr {
        if let Some(e) = f(self) {
            return e;
        }
        let bin = |a: &IndexExpr, b: &IndexExpr| (a.rewrite(f), b.rewrite(f));
        match self {
            IndexExpr::Const(_) | IndexExpr::Var(_) | IndexExpr::DimOf(..) => self.clone(),
            IndexExpr::Add(a, b) => {
                let (a, b) = bin(a, b);
                IndexExpr::add(a, b)
            }
            IndexExpr::Sub(a, b) => {
                let (a, b) = bin(a, b);
                IndexExpr::sub(a, b)
            }
            IndexExpr::Mul(a, b) => {
                let (a, b) = bin(a, b);
                IndexExpr::mul(a, b)
            }
            IndexExpr::Min(a, b) => {
                let (a, b) = bin(a, b);
                IndexExpr::min(a, b)
            }
            IndexExpr::FloorDiv(a, b) => {
                let (a, b) = bin(a, b);
                IndexExpr::floor_div(a, b)
            }
            IndexExpr::CeilDiv(a, b) => {
                let (a, b) = bin(a, b);
                IndexExpr::ceil_div(a, b)
            }
            IndexExpr::Mod(a, b) => {
                let (a, b) = bin(a, b);
                IndexExpr::modulo(a, b)
            }
        }
    }

    pub fn vals(&self, out: &mut Vec<Val>) {
        match self {
            IndexExpr::DimOf(v, _) => out.push(*v),
            IndexExpr::Const(_) | IndexExpr::Var(_) => {}
            IndexExpr::Add(a, b)
            | IndexExpr::Sub(a, b)
            | IndexExpr::Mul(a, b)
            | IndexExpr::Min(a, b)
            | IndexExpr::FloorDiv(a, b)
            | IndexExpr::CeilDiv(a, b)
            | IndexExpr::Mod(a, b) => {
                a.vals(out);
                b.vals(out);
            }
        }
    }

    pub fn vars(&self, out: &mut Vec<Var>) {
        match self {
            IndexExpr::Var(v) => out.push(*v),
            IndexExpr::Const(_) | IndexExpr::DimOf(..) => {}
            IndexExpr::Add(a, b)
            | IndexExpr::Sub(a, b)
            | IndexExpr::Mul(a, b)
            | IndexExpr::Min(a, b)
            | IndexExpr::FloorDiv(a, b)
            | IndexExpr::CeilDiv(a, b)
            | IndexExpr::Mod(a, b) => {
                a.vars(out);
                b.vars(out);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum IndexEvalError {
    #[error("unbound loop variable {0}")]
    UnboundVar(Var),
    #[error("extent of {0} axis {1} is unknown")]
    UnknownDim(Val, usize),
    #[error("division by a non-positive value")]
    NonPositiveDivisor,
}

impl fmt::Display for IndexExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            IndexExpr::Const(c) => write!(f, "{c}"),
            IndexExpr::Var(v) => write!(f, "{v}"),
            IndexExpr::DimOf(v, axis) => write!(f, "dim({v}, {axis})"),
            IndexExpr::Add(a, b) => write!(f, "({a} + {b})"),
            IndexExpr::Sub(a, b) => write!(f, "({a} - {b})"),
            IndexExpr::Mul(a, b) => write!(f, "({a} * {b})"),
            IndexExpr::Min(a, b) => write!(f, "min({a}, {b})"),
            IndexExpr::FloorDiv(a, b) => write!(f, "floordiv({a}, {b})"),
            IndexExpr::CeilDiv(a, b) => write!(f, "ceildiv({a}, {b})"),
            IndexExpr::Mod(a, b) => write!(f, "mod({a}, {b})"),
        }
    }
}

/// Guard condition of an `if` op.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Pred {
    Lt(IndexExpr, IndexExpr),
    Eq(IndexExpr, IndexExpr),
}

impl Pred {
    pub fn exprs(&self) -> [&IndexExpr; 2] {
        match self {
            Pred::Lt(a, b) | Pred::Eq(a, b) => [a, b],
        }
    }

    pub fn map(&self, f: impl Fn(&IndexExpr) -> IndexExpr) -> Pred {
        match self {
            Pred::Lt(a, b) => Pred::Lt(f(a), f(b)),
            Pred::Eq(a, b) => Pred::Eq(f(a), f(b)),
        }
    }

    pub fn eval(
        &self,
        var: &dyn Fn(Var) -> Option<i64>,
        dim: &dyn Fn(Val, usize) -> Option<i64>,
    ) -> Result<bool, IndexEvalError> {
        Ok(match self {
            Pred::Lt(a, b) => a.eval(var, dim)? < b.eval(var, dim)?,
            Pred::Eq(a, b) => a.eval(var, dim)? == b.eval(var, dim)?,
        })
    }
}

impl fmt::Display for Pred {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Pred::Lt(a, b) => write!(f, "{a} < {b}"),
            Pred::Eq(a, b) => write!(f, "{a} == {b}"),
        }
    }
}
