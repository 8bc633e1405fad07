//! Virtual multithreading: `forall` over a partition of the outermost parallel
//! dimension, and its lowering to an async group of fork-join tasks.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use crate::ir::{GenericOp, IndexExpr, KernelProgram, Op, OpKind, Val};

use super::vectorize::{dim_extent, is_vectorized, unit_operands, VECTOR_EPILOGUE};
use super::{Bounds, PassError};

pub const VIRTUAL_THREADS: &str = "virtual_threads";
pub const ASYNC_THREADS: &str = "async_threads";
pub const DEFAULT_MT_THRESHOLD: usize = 32_768;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Distribution {
    /// Contiguous blocks of `ceil(n / T)` elements, one per thread.
    Block,
    /// Chunks of the given size dealt round-robin.
    Cyclic(usize),
}

impl fmt::Display for Distribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Distribution::Block => f.write_str("block"),
            Distribution::Cyclic(c) => write!(f, "cyclic:{c}"),
        }
    }
}

impl FromStr for Distribution {
    type Err = PassError;

    fn from_str(s: &str) -> Result<Self, PassError> {
        if s == "block" {
            return Ok(Distribution::Block);
        }
        match s.strip_prefix("cyclic:").map(str::parse::<usize>) {
            Some(Ok(c)) if c > 0 => Ok(Distribution::Cyclic(c)),
            _ => Err(PassError::Distribution(format!("`{s}` (expected block or cyclic:CHUNK)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ThreadingOptions {
    pub threads: usize,
    pub dist: Distribution,
    /// Units with fewer iteration points stay single-threaded.
    pub threshold: usize,
}

impl Default for ThreadingOptions {
    fn default() -> Self {
        Self { threads: 4, dist: Distribution::Block, threshold: DEFAULT_MT_THRESHOLD }
    }
}

pub fn form_virtual_threads(program: &KernelProgram, opts: &ThreadingOptions) -> Result<KernelProgram, PassError> {
    if opts.threads < 1 {
        return Err(PassError::Distribution("thread count must be at least 1".into()));
    }
    let mut out = program.clone();
    let mut bounds = Bounds::default();
    for d in &out.decls {
        bounds.set_dims(d.id, d.shape.iter().map(|&s| Some((s as i64, s as i64))).collect());
    }
    let body = std::mem::take(&mut out.body);
    out.body = thread_block(&mut out, body, opts, &mut bounds);
    out.stage = "mt".into();
    Ok(out)
}

fn thread_block(p: &mut KernelProgram, ops: Vec<Op>, opts: &ThreadingOptions, b: &mut Bounds) -> Vec<Op> {
    let mut out = Vec::with_capacity(ops.len());
    let mut it = ops.into_iter().peekable();
    while let Some(mut op) = it.next() {
        match &op.kind {
            OpKind::Forall { .. } | OpKind::AsyncExecute { .. } => {
                out.push(op);
                continue;
            }
            OpKind::ExtractSlice { result, sizes, .. } => {
                let dims = sizes.iter().map(|s| b.of(s)).collect();
                b.set_dims(*result, dims);
            }
            _ => {}
        }
        let unit = if op.as_generic().is_some() || is_vectorized(&op) {
            let mut unit = vec![op];
            if is_vectorized(&unit[0]) && it.peek().is_some_and(|n| n.has(VECTOR_EPILOGUE)) {
                unit.push(it.next().unwrap());
            }
            unit
        } else {
            if let OpKind::For { var, lb, ub, step, .. } = &op.kind {
                if let (Some((lo, _)), Some((_, hi))) = (b.of(lb), b.of(ub)) {
                    b.set_var(*var, lo, (hi - step).max(lo));
                }
            }
            if let Some(body) = op.kind.body_mut() {
                let inner = std::mem::take(body);
                *op.kind.body_mut().unwrap() = thread_block(p, inner, opts, b);
            }
            out.push(op);
            continue;
        };
        match thread_unit(p, &unit, opts, b) {
            Some(forall) => out.push(forall),
            None => out.extend(unit),
        }
    }
    out
}

/// Upper bound on iteration points of a unit.
fn unit_points(ops: &[Op], b: &mut Bounds) -> Option<i64> {
    let mut total = 0i64;
    for op in ops {
        match &op.kind {
            OpKind::Generic(g) => {
                let mut n = 1i64;
                for e in &g.domain {
                    n = n.saturating_mul(b.of(e)?.1.max(0));
                }
                total = total.saturating_add(n);
            }
            OpKind::ExtractSlice { result, sizes, .. } => {
                let dims = sizes.iter().map(|s| b.of(s)).collect();
                b.set_dims(*result, dims);
            }
            OpKind::For { var, lb, ub, step, body } => {
                let (lo, hi) = (b.of(lb)?.0, b.of(ub)?.1);
                let trips = ((hi - lo).max(0) + step - 1) / step;
                b.set_var(*var, lo, (hi - step).max(lo));
                total = total.saturating_add(trips.saturating_mul(unit_points(body, b)?));
            }
            OpKind::If { then_body, .. } => total = total.saturating_add(unit_points(then_body, b)?),
            _ => {}
        }
    }
    Some(total)
}

fn thread_unit(p: &mut KernelProgram, unit: &[Op], opts: &ThreadingOptions, b: &mut Bounds) -> Option<Op> {
    let points = unit_points(unit, &mut b.clone())?;
    if points < opts.threshold as i64 {
        return None;
    }
    let (core, outer) = unit_operands(unit)?;
    let nin = core.inputs.len();
    let out_map = core.output_map(0);
    let d = (0..core.rank()).find(|&d| core.iterators[d] == crate::ir::IteratorKind::Parallel && out_map.uses_dim(d))?;
    let out_axis = out_map.axis_of(d)?;
    let n = IndexExpr::DimOf(outer[nin], out_axis);
    let t = opts.threads as i64;
    let chunk = match opts.dist {
        Distribution::Block => IndexExpr::ceil_div(n.clone(), t),
        Distribution::Cyclic(c) => IndexExpr::Const(c as i64),
    };
    let tv = p.fresh_var();
    let cv = p.fresh_var();
    let off = IndexExpr::mul(cv, chunk.clone());
    let size = IndexExpr::min(chunk.clone(), IndexExpr::sub(n.clone(), off.clone()));
    let mut body = Vec::new();
    let mut subst: HashMap<Val, Val> = HashMap::new();
    for (k, v) in outer.iter().enumerate() {
        if subst.contains_key(v) {
            continue;
        }
        let map = &core.maps[k];
        let Some(a) = map.axis_of(d) else { continue };
        let rank = map.results.len();
        let r = p.fresh_val();
        let offsets = (0..rank).map(|ax| if ax == a { off.clone() } else { IndexExpr::Const(0) }).collect();
        let sizes = (0..rank).map(|ax| if ax == a { size.clone() } else { IndexExpr::DimOf(*v, ax) }).collect();
        body.push(p.op(OpKind::ExtractSlice { result: r, source: *v, offsets, sizes }));
        subst.insert(*v, r);
    }
    let unit = normalize_plain(unit);
    body.extend(p.clone_ops(&unit, &mut subst, &mut HashMap::new()));
    let lp = p.op(OpKind::For { var: cv, lb: IndexExpr::Var(tv), ub: IndexExpr::ceil_div(n, chunk), step: t, body });
    Some(
        p.op(OpKind::Forall { var: tv, num_threads: opts.threads, body: vec![lp] })
            .annotate(VIRTUAL_THREADS)
            .annotate(format!("dist={}", opts.dist)),
    )
}

/// A bare generic gets its extents from its operands so that it shrinks with
/// the thread slices.
fn normalize_plain(unit: &[Op]) -> Vec<Op> {
    unit.iter()
        .map(|op| match &op.kind {
            OpKind::Generic(g) => {
                let domain = (0..g.rank()).map(|d| dim_extent(g, d)).collect();
                Op { kind: OpKind::Generic(GenericOp { domain, ..g.clone() }), ..op.clone() }
            }
            _ => op.clone(),
        })
        .collect()
}

/// Lowers every `forall` to `async_group`, one `async_execute` per thread
/// added to the group, and an `await_all`.
pub fn form_async_threads(program: &KernelProgram) -> Result<KernelProgram, PassError> {
    let mut out = program.clone();
    let body = std::mem::take(&mut out.body);
    out.body = async_block(&mut out, body)?;
    out.stage = "async".into();
    Ok(out)
}

fn async_block(p: &mut KernelProgram, ops: Vec<Op>) -> Result<Vec<Op>, PassError> {
    let mut out = Vec::with_capacity(ops.len());
    for mut op in ops {
        if let OpKind::Forall { var, num_threads, body } = &op.kind {
            let mut nested = None;
            crate::ir::walk_ops(body, 0, &mut |o, _| {
                if matches!(o.kind, OpKind::Forall { .. }) {
                    nested.get_or_insert(o.id);
                }
            });
            if let Some(id) = nested {
                return Err(PassError::NestedForall(id));
            }
            let (var, t, body) = (*var, *num_threads, body.clone());
            let group = p.fresh_val();
            let token = p.fresh_val();
            out.push(p.op(OpKind::AsyncGroup { group, size: IndexExpr::Const(t as i64) }).annotate(ASYNC_THREADS));
            let exec = p.op(OpKind::AsyncExecute { token, body });
            let add = p.op(OpKind::AddToGroup { group, token });
            let mut fork = p.op(OpKind::For {
                var,
                lb: IndexExpr::Const(0),
                ub: IndexExpr::Const(t as i64),
                step: 1,
                body: vec![exec, add],
            });
            fork.annotations = op.annotations.clone();
            out.push(fork.annotate(ASYNC_THREADS));
            out.push(p.op(OpKind::AwaitAll { group }).annotate(ASYNC_THREADS));
            continue;
        }
        if !matches!(op.kind, OpKind::AsyncExecute { .. }) {
            if let Some(body) = op.kind.body_mut() {
                let inner = std::mem::take(body);
                *op.kind.body_mut().unwrap() = async_block(p, inner)?;
            }
        }
        out.push(op);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::{compile_source, RowShape};
    use crate::interp::{interpret, interpret_with, InterpOptions, TensorValue};
    use crate::ir::verify;

    fn prog(n: usize) -> KernelProgram {
        compile_source("kernel k(x: row<f32>) -> (y: row<f32>) { y = exp(x) + x; }", RowShape::one_d(n)).unwrap()
    }

    fn opts(threads: usize, dist: Distribution) -> ThreadingOptions {
        ThreadingOptions { threads, dist, threshold: 1 }
    }

    fn run(p: &KernelProgram, n: usize, threaded: bool) -> Vec<f32> {
        let x = TensorValue::from_fn(vec![n], |i| (i as f32).sin());
        let inputs = [("x".to_string(), x)].into_iter().collect();
        let r = if threaded {
            interpret_with(p, &inputs, InterpOptions { threaded: true, ..Default::default() }).map(|r| r.outputs)
        } else {
            interpret(p, &inputs)
        };
        r.unwrap()["y"].data.clone()
    }

    #[test]
    fn distribution_parses() {
        assert_eq!("block".parse::<Distribution>().unwrap(), Distribution::Block);
        assert_eq!("cyclic:8".parse::<Distribution>().unwrap(), Distribution::Cyclic(8));
        assert!("cyclic:0".parse::<Distribution>().is_err());
        assert!("round".parse::<Distribution>().is_err());
    }

    #[test]
    fn below_threshold_untouched() {
        let p = prog(100);
        let t = form_virtual_threads(&p, &ThreadingOptions { threshold: 101, ..Default::default() }).unwrap();
        assert_eq!(t.body, p.body);
        let t = form_virtual_threads(&p, &ThreadingOptions { threshold: 100, ..Default::default() }).unwrap();
        assert!(t.body[0].has(VIRTUAL_THREADS));
    }

    #[test]
    fn block_and_cyclic_agree_with_sequential() {
        let p = prog(103);
        let want = run(&p, 103, false);
        for dist in [Distribution::Block, Distribution::Cyclic(5)] {
            let t = form_virtual_threads(&p, &opts(4, dist)).unwrap();
            assert!(verify(&t, None).is_ok(), "{}", verify(&t, None));
            assert_eq!(run(&t, 103, false), want);
            let a = form_async_threads(&t).unwrap();
            assert!(verify(&a, None).is_ok(), "{}", verify(&a, None));
            assert_eq!(run(&a, 103, true), want);
        }
    }

    #[test]
    fn async_lowering_shape() {
        let a = form_async_threads(&form_virtual_threads(&prog(64), &opts(4, Distribution::Block)).unwrap()).unwrap();
        let names: Vec<_> = a.body.iter().map(|o| o.kind.name()).collect();
        assert_eq!(names, ["async_group", "for", "await_all"]);
        assert_eq!(a.count_ops(|o| matches!(o.kind, OpKind::AsyncExecute { .. })), 1);
    }
}
