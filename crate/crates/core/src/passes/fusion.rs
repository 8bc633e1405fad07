//! Producer/consumer fusion of generics: `z = g(f(x))` without materializing `f(x)`.

use std::fmt;

use crate::ir::{op_uses, AffineIndexMap, GenericOp, KernelProgram, OpId, OpKind, PayloadExpr, Role, Val};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RejectReason {
    ProducerHasReduction,
    MapMismatch,
    MultiUse,
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RejectReason::ProducerHasReduction => "producer_has_reduction",
            RejectReason::MapMismatch => "map_mismatch",
            RejectReason::MultiUse => "multi_use",
        })
    }
}

/// A legal fusion of the top-level producer into input `operand` of the consumer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FusionCandidate {
    pub producer: OpId,
    pub consumer: OpId,
    pub operand: usize,
    /// Producer domain dim -> consumer domain dim; `None` pins a unit dim to 0.
    pub witness: Vec<Option<usize>>,
}

fn index_of(program: &KernelProgram, id: OpId) -> Option<usize> {
    program.body.iter().position(|op| op.id == id)
}

/// Checks whether the top-level `producer` can be fused into input `operand`
/// of the top-level `consumer`.
pub fn fusion_legal(
    program: &KernelProgram,
    producer: OpId,
    consumer: OpId,
    operand: usize,
) -> Result<FusionCandidate, RejectReason> {
    let (pi, ci) = match (index_of(program, producer), index_of(program, consumer)) {
        (Some(p), Some(c)) if p < c => (p, c),
        _ => return Err(RejectReason::MapMismatch),
    };
    let (Some(p), Some(q)) = (program.body[pi].as_generic(), program.body[ci].as_generic()) else {
        return Err(RejectReason::MapMismatch);
    };
    let Some(&y) = q.inputs.get(operand) else {
        return Err(RejectReason::MapMismatch);
    };
    if p.outputs != [y] {
        return Err(RejectReason::MapMismatch);
    }
    if !p.is_all_parallel() || p.reductions.iter().any(Option::is_some) {
        return Err(RejectReason::ProducerHasReduction);
    }
    let decl = program.decl(y).ok_or(RejectReason::MapMismatch)?;
    if decl.role != Role::Temp || p.inputs.contains(&y) {
        return Err(RejectReason::MultiUse);
    }
    let mut uses = 0;
    program.walk(&mut |op, _| uses += op_uses(&op.kind).iter().filter(|v| **v == y).count());
    // one write by the producer, one read by the consumer
    if uses != 2 {
        return Err(RejectReason::MultiUse);
    }
    // Nothing between the two may write what the producer reads.
    for op in &program.body[pi + 1..ci] {
        let written: Vec<Val> = match &op.kind {
            OpKind::Generic(g) => g.outputs.clone(),
            OpKind::Copy { dst, .. } | OpKind::DmaStart { dst, .. } => vec![*dst],
            OpKind::ExtractSlice { .. } | OpKind::Alloc { .. } | OpKind::Dealloc { .. } => vec![],
            _ => return Err(RejectReason::MapMismatch),
        };
        if written.iter().any(|w| p.inputs.contains(w)) {
            return Err(RejectReason::MapMismatch);
        }
    }
    let witness = witness(p, p.output_map(0), q, q.input_map(operand)).ok_or(RejectReason::MapMismatch)?;
    Ok(FusionCandidate { producer, consumer, operand, witness })
}

/// Relabels producer dims as consumer dims so that the producer's output map
/// and the consumer's input map address the same element of `Y`.
fn witness(p: &GenericOp, p_out: &AffineIndexMap, q: &GenericOp, q_in: &AffineIndexMap) -> Option<Vec<Option<usize>>> {
    if p_out.results.len() != p.rank() || q_in.results.len() != p_out.results.len() {
        return None;
    }
    let mut w = vec![None; p.rank()];
    let mut seen = vec![false; p.rank()];
    for (axis, r) in p_out.results.iter().enumerate() {
        let d = (*r)?;
        if std::mem::replace(&mut seen[d], true) {
            return None;
        }
        w[d] = q_in.results[axis];
        match w[d] {
            Some(qd) if p.domain[d] != q.domain[qd] => return None,
            None if p.domain[d].constant() != Some(1) => return None,
            _ => {}
        }
    }
    Some(w)
}

/// Splices the producer into the consumer, drops `Y`, dedupes inputs.
fn apply(program: &mut KernelProgram, c: &FusionCandidate) {
    let pi = index_of(program, c.producer).unwrap();
    let producer = program.body.remove(pi);
    let p = producer.as_generic().unwrap().clone();
    let ci = index_of(program, c.consumer).unwrap();
    let OpKind::Generic(q) = &mut program.body[ci].kind else { unreachable!() };
    let y = q.inputs[c.operand];
    let nin = q.inputs.len();

    // New input list: consumer inputs without Y, then producer inputs, deduped.
    let mut inputs: Vec<(Val, AffineIndexMap)> = Vec::new();
    let slot = |v: Val, m: AffineIndexMap, inputs: &mut Vec<(Val, AffineIndexMap)>| {
        inputs.iter().position(|(iv, im)| *iv == v && *im == m).unwrap_or_else(|| {
            inputs.push((v, m));
            inputs.len() - 1
        })
    };
    let mut q_args = Vec::with_capacity(nin);
    for i in 0..nin {
        if i == c.operand {
            q_args.push(usize::MAX);
        } else {
            q_args.push(slot(q.inputs[i], q.maps[i].clone(), &mut inputs));
        }
    }
    let mut p_args = Vec::with_capacity(p.inputs.len());
    for (i, v) in p.inputs.iter().enumerate() {
        let m = AffineIndexMap::new(p.maps[i].results.iter().map(|r| r.and_then(|d| c.witness[d])).collect());
        p_args.push(slot(*v, m, &mut inputs));
    }
    let inner = p.payloads[0].substitute_args(&|i| PayloadExpr::Arg(p_args[i]));
    let payloads = q
        .payloads
        .iter()
        .map(|g| g.substitute_args(&|i| if i == c.operand { inner.clone() } else { PayloadExpr::Arg(q_args[i]) }))
        .collect();
    let out_maps: Vec<AffineIndexMap> = q.maps[nin..].to_vec();
    q.inputs = inputs.iter().map(|(v, _)| *v).collect();
    q.maps = inputs.into_iter().map(|(_, m)| m).chain(out_maps).collect();
    q.payloads = payloads;
    program.remove_decl(y);
}

/// One candidate per top-level consumer input, in consumer-then-operand order.
pub fn candidates(program: &KernelProgram) -> Vec<Result<FusionCandidate, (OpId, OpId, usize, RejectReason)>> {
    let mut out = Vec::new();
    for (ci, cop) in program.body.iter().enumerate() {
        let Some(q) = cop.as_generic() else { continue };
        for (operand, y) in q.inputs.iter().enumerate() {
            let producer = program.body[..ci]
                .iter()
                .rev()
                .find(|op| op.as_generic().is_some_and(|g| g.outputs.contains(y)));
            if let Some(pop) = producer {
                out.push(
                    fusion_legal(program, pop.id, cop.id, operand).map_err(|r| (pop.id, cop.id, operand, r)),
                );
            }
        }
    }
    out
}

/// Greedy fixed point: fuse the first legal candidate, then rescan.
pub fn fuse_elementwise(program: &KernelProgram) -> KernelProgram {
    fuse_with_log(program).0
}

/// As [`fuse_elementwise`], also returning the fusions applied in order.
pub fn fuse_with_log(program: &KernelProgram) -> (KernelProgram, Vec<FusionCandidate>) {
    let mut out = program.clone();
    let mut log = Vec::new();
    while let Some(c) = candidates(&out).into_iter().find_map(Result::ok) {
        apply(&mut out, &c);
        log.push(c);
    }
    out.stage = "fuse".into();
    (out, log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::{compile_source, RowShape};
    use crate::ir::verify;

    fn prog(body: &str, shape: RowShape) -> KernelProgram {
        compile_source(&format!("kernel k(x: row<f32>) -> (y: row<f32>) {{ {body} }}"), shape).unwrap()
    }

    #[test]
    fn chain_of_three_becomes_one() {
        let p = prog("a = x + 1.0; b = a * a; y = exp(b);", RowShape::one_d(16));
        let f = fuse_elementwise(&p);
        assert_eq!(f.body.len(), 1);
        assert!(verify(&f, None).is_ok());
        assert_eq!(f.decls.len(), 2);
        assert_eq!(f.body[0].as_generic().unwrap().payloads[0].to_string(), "exp(mul(add(%a0, 1.0), add(%a0, 1.0)))");
    }

    #[test]
    fn reduction_producer_rejected() {
        let p = prog("m = sum(x, axis=0); y = x / m;", RowShape::one_d(8));
        let c = candidates(&p);
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].as_ref().unwrap_err().3, RejectReason::ProducerHasReduction);
    }

    #[test]
    fn multi_use_rejected() {
        let p = prog("a = exp(x); s = sum(a, axis=0); y = a / s;", RowShape::one_d(8));
        let reasons: Vec<_> = candidates(&p).into_iter().filter_map(Result::err).map(|e| e.3).collect();
        assert!(reasons.contains(&RejectReason::MultiUse));
        assert_eq!(fuse_elementwise(&p).body.len(), 3);
    }

    #[test]
    fn elementwise_into_reduction_consumer() {
        let p = prog("a = x * x; s = sum(a, axis=0); y = x / s;", RowShape::two_d(2, 8));
        let f = fuse_elementwise(&p);
        assert_eq!(f.body.len(), 2);
        assert!(f.body[0].as_generic().unwrap().reductions[0].is_some());
    }

    #[test]
    fn broadcast_scalar_producer_fuses_through_unit_dim() {
        let p = prog("s = sum(x, axis=0); r = sqrt(s); y = x / r;", RowShape::two_d(3, 4));
        let f = fuse_elementwise(&p);
        assert_eq!(f.body.len(), 2);
        assert!(verify(&f, None).is_ok(), "{}", verify(&f, None));
        let g = f.body[1].as_generic().unwrap();
        assert_eq!(g.input_map(1).results, [Some(0), None]);
    }

    #[test]
    fn idempotent() {
        let p = prog("a = x + 1.0; y = a * 2.0;", RowShape::one_d(4));
        let once = fuse_elementwise(&p);
        assert_eq!(fuse_elementwise(&once).body, once.body);
    }
}
