//! Strip-mining of the innermost parallel dimension into fixed-width vector
//! chunks plus a remainder epilogue.

use crate::ir::{GenericOp, IndexExpr, IteratorKind, KernelProgram, Op, OpKind, Pred, Val};

use super::PassError;

pub const VECTOR_EPILOGUE: &str = "vector_epilogue";

pub fn vectorized_tag(width: usize) -> String {
    format!("vectorized({width})")
}

pub fn is_vectorized(op: &Op) -> bool {
    op.annotation_with_prefix("vectorized(").is_some()
}

/// Width recorded by a `vectorized(W)` annotation.
pub fn vector_width(op: &Op) -> Option<usize> {
    op.annotation_with_prefix("vectorized(")?.strip_prefix("vectorized(")?.strip_suffix(')')?.parse().ok()
}

/// Extent of domain dim `d` expressed through an operand view, so that the
/// generic follows its operands when they are later resliced.
pub(crate) fn dim_extent(g: &GenericOp, d: usize) -> IndexExpr {
    let nin = g.inputs.len();
    let order = (nin..g.maps.len()).chain(0..nin);
    for k in order {
        if let Some(a) = g.maps[k].axis_of(d) {
            let v = if k < nin { g.inputs[k] } else { g.outputs[k - nin] };
            return IndexExpr::DimOf(v, a);
        }
    }
    g.domain[d].clone()
}

/// Rewrites every generic whose innermost dim is parallel as a loop over
/// `width`-element chunks followed by an epilogue for the remainder.
pub fn vectorize_innermost(program: &KernelProgram, width: usize) -> Result<KernelProgram, PassError> {
    if width < 1 {
        return Err(PassError::VectorWidth);
    }
    let mut out = program.clone();
    let body = std::mem::take(&mut out.body);
    out.body = rewrite_block(&mut out, body, width);
    out.stage = "vectorize".into();
    Ok(out)
}

fn rewrite_block(p: &mut KernelProgram, ops: Vec<Op>, width: usize) -> Vec<Op> {
    let mut out = Vec::with_capacity(ops.len());
    for mut op in ops {
        if is_vectorized(&op) || op.has(VECTOR_EPILOGUE) {
            out.push(op);
            continue;
        }
        if let Some(body) = op.kind.body_mut() {
            let inner = std::mem::take(body);
            let inner = rewrite_block(p, inner, width);
            *op.kind.body_mut().unwrap() = inner;
            out.push(op);
            continue;
        }
        let Some(g) = op.as_generic() else {
            out.push(op);
            continue;
        };
        if g.iterators.last() != Some(&IteratorKind::Parallel) {
            out.push(op);
            continue;
        }
        if width == 1 {
            out.push(op.annotate(vectorized_tag(1)));
            continue;
        }
        let g = g.clone();
        out.extend(strip_mine(p, &op, &g, width));
    }
    out
}

/// Slices every operand that uses dim `j` to `[offset, offset + size)` along it.
fn chunk(p: &mut KernelProgram, g: &GenericOp, j: usize, offset: &IndexExpr, size: &IndexExpr) -> (Vec<Op>, GenericOp) {
    let nin = g.inputs.len();
    let mut ops = Vec::new();
    let mut vals = Vec::new();
    for (v, map) in g.operands() {
        let Some(a) = map.axis_of(j) else {
            vals.push(v);
            continue;
        };
        let rank = map.results.len();
        let r = p.fresh_val();
        let offsets = (0..rank).map(|ax| if ax == a { offset.clone() } else { IndexExpr::Const(0) }).collect();
        let sizes = (0..rank).map(|ax| if ax == a { size.clone() } else { IndexExpr::DimOf(v, ax) }).collect();
        ops.push(p.op(OpKind::ExtractSlice { result: r, source: v, offsets, sizes }));
        vals.push(r);
    }
    let mut inner = GenericOp { inputs: vals[..nin].to_vec(), outputs: vals[nin..].to_vec(), ..g.clone() };
    inner.domain = (0..g.rank()).map(|d| dim_extent(&inner, d)).collect();
    (ops, inner)
}

fn strip_mine(p: &mut KernelProgram, op: &Op, g: &GenericOp, w: usize) -> Vec<Op> {
    let j = g.rank() - 1;
    let e = dim_extent(g, j);
    let wi = w as i64;
    let gv = p.fresh_var();
    let off = IndexExpr::mul(gv, wi);
    let (mut body, mut inner) = chunk(p, g, j, &off, &IndexExpr::Const(wi));
    inner.domain[j] = IndexExpr::Const(wi);
    let mut compute = p.op(OpKind::Generic(inner));
    compute.annotations = op.annotations.clone();
    body.push(compute.annotate(vectorized_tag(w)));
    let main = p
        .op(OpKind::For { var: gv, lb: IndexExpr::Const(0), ub: IndexExpr::floor_div(e.clone(), wi), step: 1, body })
        .annotate(vectorized_tag(w));
    let static_extent = g.domain[j].constant();
    if static_extent.is_some_and(|n| n % wi == 0) {
        return vec![main];
    }
    let rem = IndexExpr::modulo(e.clone(), wi);
    let start = IndexExpr::mul(IndexExpr::floor_div(e, wi), wi);
    let (mut tail, inner) = chunk(p, g, j, &start, &rem);
    let mut compute = p.op(OpKind::Generic(inner));
    compute.annotations = op.annotations.clone();
    tail.push(compute.annotate(VECTOR_EPILOGUE));
    let guard = p
        .op(OpKind::If { pred: Pred::Lt(IndexExpr::Const(0), rem), then_body: tail })
        .annotate(VECTOR_EPILOGUE);
    vec![main, guard]
}

/// Values the vectorized unit reads from outside; the core generic's operands
/// resolved through the chunk slices.
pub(crate) fn unit_operands(unit: &[Op]) -> Option<(GenericOp, Vec<Val>)> {
    let first = unit.first()?;
    let body = match &first.kind {
        OpKind::For { body, .. } if is_vectorized(first) => body,
        OpKind::Generic(g) => return Some((g.clone(), g.inputs.iter().chain(&g.outputs).copied().collect())),
        _ => return None,
    };
    let mut src = std::collections::HashMap::new();
    let mut core = None;
    for op in body {
        match &op.kind {
            OpKind::ExtractSlice { result, source, .. } => {
                src.insert(*result, *source);
            }
            OpKind::Generic(g) => core = Some(g.clone()),
            _ => {}
        }
    }
    let core = core?;
    let outer = core.inputs.iter().chain(&core.outputs).map(|v| *src.get(v).unwrap_or(v)).collect();
    Some((core, outer))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::{compile_source, RowShape};
    use crate::interp::{interpret, TensorValue};
    use crate::ir::verify;

    fn gelu_like(n: usize) -> KernelProgram {
        compile_source("kernel k(x: row<f32>) -> (y: row<f32>) { y = x * tanh(x); }", RowShape::one_d(n)).unwrap()
    }

    fn run(p: &KernelProgram, n: usize) -> Vec<f32> {
        let x = TensorValue::from_fn(vec![n], |i| i as f32 * 0.37 - 3.0);
        let out = interpret(p, &[("x".to_string(), x)].into_iter().collect()).unwrap();
        out["y"].data.clone()
    }

    #[test]
    fn divisible_extent_has_no_epilogue() {
        let v = vectorize_innermost(&gelu_like(64), 16).unwrap();
        assert_eq!(v.body.len(), 1);
        assert_eq!(vector_width(&v.body[0]), Some(16));
        assert!(verify(&v, None).is_ok(), "{}", verify(&v, None));
    }

    #[test]
    fn remainder_goes_to_epilogue_bit_exact() {
        let p = gelu_like(37);
        let v = vectorize_innermost(&p, 8).unwrap();
        assert_eq!(v.body.len(), 2);
        assert!(v.body[1].has(VECTOR_EPILOGUE));
        assert!(verify(&v, None).is_ok(), "{}", verify(&v, None));
        let (a, b) = (run(&p, 37), run(&v, 37));
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn reduction_innermost_untouched() {
        let p = compile_source("kernel k(x: row<f32>) -> (y: scalar<f32>) { y = sum(x, axis=0); }", RowShape::two_d(2, 8))
            .unwrap();
        assert_eq!(vectorize_innermost(&p, 4).unwrap().body, p.body);
    }

    #[test]
    fn zero_width_rejected() {
        assert_eq!(vectorize_innermost(&gelu_like(8), 0).unwrap_err(), PassError::VectorWidth);
    }
}
