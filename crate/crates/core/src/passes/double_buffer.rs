//! Double buffering of tiled loops in two stages.
//!
//! `db_structural` hoists ping/pong scratch buffers out of each tiled loop,
//! loads tile 0 in a prologue, and gives the body two kernels selected by a
//! toggle cell. Each kernel prefetches tile `i+1` into the other buffer,
//! computes on the current one and flips the toggle. `db_dma` then turns the
//! tile copies into tagged DMA transfers with waits.

use std::collections::{HashMap, HashSet};

use crate::ir::{IndexExpr, KernelProgram, Op, OpKind, Pred, Val, Var};

use super::tiling::TILED_GENERIC;
use super::PassError;

pub const DB_PROLOGUE: &str = "db_prologue";
pub const DB_PREFETCH: &str = "db_prefetch";
pub const DB_PING: &str = "db_ping_kernel";
pub const DB_PONG: &str = "db_pong_kernel";
pub const DB_CURRENT: &str = "db_current";
pub const DB_LOOP: &str = "db_loop";

pub fn db_structural(program: &KernelProgram) -> Result<KernelProgram, PassError> {
    let mut out = program.clone();
    let body = std::mem::take(&mut out.body);
    let mut counter = 0;
    out.body = structural_block(&mut out, body, &mut counter);
    out.stage = "db-structural".into();
    Ok(out)
}

fn structural_block(p: &mut KernelProgram, ops: Vec<Op>, counter: &mut usize) -> Vec<Op> {
    let mut out = Vec::with_capacity(ops.len());
    for mut op in ops {
        if matches!(op.kind, OpKind::Forall { .. } | OpKind::AsyncExecute { .. }) || op.has(DB_LOOP) {
            out.push(op);
            continue;
        }
        if op.has(TILED_GENERIC) {
            if let Some(ops) = double_buffer_loop(p, &op, *counter) {
                *counter += 1;
                out.extend(ops);
                continue;
            }
        }
        if let Some(body) = op.kind.body_mut() {
            let inner = std::mem::take(body);
            *op.kind.body_mut().unwrap() = structural_block(p, inner, counter);
        }
        out.push(op);
    }
    out
}

/// One staged operand of a tiled loop body.
struct Staged {
    buf: Val,
    view: Op,
    /// `tile_src` slice and `tile_load` copy, inputs only.
    load: Option<(Op, Op)>,
}

fn subst_var_in(ops: &mut [Op], var: Var, with: &IndexExpr) {
    for op in ops {
        match &mut op.kind {
            OpKind::ExtractSlice { offsets, sizes, .. } => {
                for e in offsets.iter_mut().chain(sizes.iter_mut()) {
                    *e = e.substitute_var(var, with);
                }
            }
            OpKind::Generic(g) => {
                for e in &mut g.domain {
                    *e = e.substitute_var(var, with);
                }
            }
            _ => {}
        }
        if let Some(body) = op.kind.body_mut() {
            subst_var_in(body, var, with);
        }
    }
}

fn double_buffer_loop(p: &mut KernelProgram, lp: &Op, k: usize) -> Option<Vec<Op>> {
    let OpKind::For { var: iv, lb, ub, step, body } = &lp.kind else { return None };
    let (iv, step) = (*iv, *step);
    let mut staged: Vec<Staged> = Vec::new();
    let mut pending_src: HashMap<Val, Op> = HashMap::new();
    let mut compute = Vec::new();
    let mut stores = Vec::new();
    for op in body {
        let Some(tag) = op.annotation_with_prefix("tile_") else {
            compute.push(op.clone());
            continue;
        };
        match (tag, &op.kind) {
            ("tile_src", OpKind::ExtractSlice { result, .. }) => {
                pending_src.insert(*result, op.clone());
            }
            ("tile_alloc", OpKind::Alloc { buf }) => {
                staged.push(Staged { buf: *buf, view: op.clone(), load: None });
            }
            ("tile_view", OpKind::ExtractSlice { source, .. }) => {
                staged.iter_mut().find(|s| s.buf == *source)?.view = op.clone();
            }
            ("tile_load", OpKind::Copy { src, dst }) => {
                let s = staged.iter_mut().find(|s| view_result(&s.view) == Some(*dst))?;
                s.load = Some((pending_src.remove(src)?, op.clone()));
            }
            ("tile_dst" | "tile_store", _) => stores.push(op.clone()),
            ("tile_dealloc", _) => {}
            _ => return None,
        }
    }
    if staged.is_empty() || staged.iter().any(|s| view_result(&s.view).is_none()) {
        return None;
    }

    let mut pre = Vec::new();
    let mut post = Vec::new();
    let mut pairs = Vec::new();
    for s in &staged {
        let decl = p.decl(s.buf)?.clone();
        let ping = p.add_tensor(format!("{}_ping", decl.name), decl.shape.clone(), decl.elem, decl.space, decl.role);
        let pong = p.add_tensor(format!("{}_pong", decl.name), decl.shape.clone(), decl.elem, decl.space, decl.role);
        pre.push(p.op(OpKind::Alloc { buf: ping }));
        pre.push(p.op(OpKind::Alloc { buf: pong }));
        pairs.push((ping, pong));
    }
    for (ping, pong) in pairs.iter().rev() {
        post.push(p.op(OpKind::Dealloc { buf: *pong }));
        post.push(p.op(OpKind::Dealloc { buf: *ping }));
    }
    let cell = p.add_toggle(format!("db_sel{k}"));
    pre.push(p.op(OpKind::StoreToggle { cell, value: IndexExpr::Const(0) }));

    // Loads of the tile at `at` into buffer set `which` (0 ping, 1 pong).
    let loads = |p: &mut KernelProgram, which: usize, at: &IndexExpr| -> Vec<Op> {
        let mut ops = Vec::new();
        for (s, pair) in staged.iter().zip(&pairs) {
            let Some((src, copy)) = &s.load else { continue };
            let buf = if which == 0 { pair.0 } else { pair.1 };
            let mut subst = HashMap::from([(s.buf, buf)]);
            let mut cloned = p.clone_ops(&[src.clone(), s.view.clone(), copy.clone()], &mut subst, &mut HashMap::new());
            subst_var_in(&mut cloned, iv, at);
            ops.extend(cloned);
        }
        ops
    };

    let prologue_body = loads(p, 0, lb);
    let prologue = p
        .op(OpKind::If { pred: Pred::Lt(lb.clone(), ub.clone()), then_body: prologue_body })
        .annotate(DB_PROLOGUE)
        .annotate(format!("db_generic={k}"));
    pre.push(prologue);

    let next = IndexExpr::add(iv, step);
    let mut kernels = Vec::new();
    for which in 0..2 {
        let mut kb = Vec::new();
        let prefetch_body = loads(p, 1 - which, &next);
        kb.push(
            p.op(OpKind::If { pred: Pred::Lt(next.clone(), ub.clone()), then_body: prefetch_body })
                .annotate(DB_PREFETCH),
        );
        let mut subst = HashMap::new();
        for (s, pair) in staged.iter().zip(&pairs) {
            let buf = if which == 0 { pair.0 } else { pair.1 };
            let view = view_result(&s.view).unwrap();
            let mut m = HashMap::from([(s.buf, buf)]);
            let mut cur = p.clone_ops(std::slice::from_ref(&s.view), &mut m, &mut HashMap::new());
            let mut v = cur.remove(0);
            if s.load.is_some() {
                v = v.annotate(DB_CURRENT);
            }
            subst.insert(view, view_result(&v).unwrap());
            kb.push(v);
        }
        kb.extend(p.clone_ops(&compute, &mut subst, &mut HashMap::new()));
        kb.extend(p.clone_ops(&stores, &mut subst, &mut HashMap::new()));
        kb.push(p.op(OpKind::StoreToggle { cell, value: IndexExpr::Const(1 - which as i64) }));
        kernels.push(kb);
    }
    let sel = p.fresh_var();
    let mut new_body = vec![p.op(OpKind::LoadToggle { cell, result: sel })];
    for (which, kb) in kernels.into_iter().enumerate() {
        let pred = Pred::Eq(IndexExpr::Var(sel), IndexExpr::Const(which as i64));
        new_body.push(p.op(OpKind::If { pred, then_body: kb }).annotate(if which == 0 { DB_PING } else { DB_PONG }));
    }
    let mut new_loop = lp.clone();
    if let OpKind::For { body, .. } = &mut new_loop.kind {
        *body = new_body;
    }
    new_loop = new_loop.annotate(DB_LOOP).annotate(format!("db_generic={k}"));
    let mut out = pre;
    out.push(new_loop);
    out.extend(post);
    Some(out)
}

fn view_result(op: &Op) -> Option<Val> {
    match &op.kind {
        OpKind::ExtractSlice { result, .. } => Some(*result),
        _ => None,
    }
}

/// Second stage: tile loads become `dma_start` on a per-buffer tag, the
/// current buffer is waited on before compute, and write-backs become a
/// `dma_start` followed by its `dma_wait`.
pub fn db_dma(program: &KernelProgram) -> Result<KernelProgram, PassError> {
    if program.count_ops(|o| o.has(DB_LOOP)) == 0 {
        return Err(PassError::DbAnnotationsAbsent);
    }
    let mut out = program.clone();
    let mut roots = HashMap::new();
    out.walk(&mut |op, _| {
        if let OpKind::ExtractSlice { result, source, .. } = &op.kind {
            roots.insert(*result, *source);
        }
    });
    let root = |mut v: Val| {
        while let Some(s) = roots.get(&v) {
            v = *s;
        }
        v
    };
    let mut tags: HashMap<Val, Val> = HashMap::new();
    let body = std::mem::take(&mut out.body);
    out.body = dma_block(&mut out, body, &root, &mut tags, &mut HashSet::new(), false);
    out.stage = "db-dma".into();
    Ok(out)
}

fn tag_for(p: &mut KernelProgram, tags: &mut HashMap<Val, Val>, buf: Val) -> Val {
    if let Some(t) = tags.get(&buf) {
        return *t;
    }
    let name = format!("{}_tag", p.decl(buf).map_or("buf".to_string(), |d| d.name.clone()));
    let t = p.add_tag(name);
    tags.insert(buf, t);
    t
}

fn dma_block(
    p: &mut KernelProgram,
    ops: Vec<Op>,
    root: &dyn Fn(Val) -> Val,
    tags: &mut HashMap<Val, Val>,
    allocated: &mut HashSet<Val>,
    inside: bool,
) -> Vec<Op> {
    let mut out = Vec::with_capacity(ops.len());
    for mut op in ops {
        if op.has(DB_LOOP) {
            let mut lp = op;
            if let Some(body) = lp.kind.body_mut() {
                let inner = std::mem::take(body);
                *lp.kind.body_mut().unwrap() = dma_block(p, inner, root, tags, allocated, true);
            }
            // Tags first used in this loop live around it; the prologue sits
            // right before the loop, so allocate ahead of it.
            let mut new: Vec<Val> = tags.values().copied().filter(|t| !allocated.contains(t)).collect();
            new.sort();
            allocated.extend(&new);
            let at = out.iter().rposition(|o: &Op| o.has(DB_PROLOGUE)).unwrap_or(out.len());
            for t in &new {
                let a = p.op(OpKind::Alloc { buf: *t });
                out.insert(at, a);
            }
            out.push(lp);
            for t in new.iter().rev() {
                out.push(p.op(OpKind::Dealloc { buf: *t }));
            }
            continue;
        }
        match &op.kind {
            OpKind::Copy { src, dst } if inside && op.has("tile_load") => {
                let tag = tag_for(p, tags, root(*dst));
                let mut d = p.op(OpKind::DmaStart { src: *src, dst: *dst, tag });
                d.annotations = op.annotations.clone();
                out.push(d);
                continue;
            }
            OpKind::Copy { src, dst } if inside && op.has("tile_store") => {
                let tag = tag_for(p, tags, root(*src));
                let mut d = p.op(OpKind::DmaStart { src: *src, dst: *dst, tag });
                d.annotations = op.annotations.clone();
                out.push(d);
                out.push(p.op(OpKind::DmaWait { tag }).annotate("tile_store_wait"));
                continue;
            }
            _ => {}
        }
        let is_kernel = op.has(DB_PING) || op.has(DB_PONG);
        let inside = inside || op.has(DB_PROLOGUE);
        if let Some(body) = op.kind.body_mut() {
            let inner = std::mem::take(body);
            let mut inner = dma_block(p, inner, root, tags, allocated, inside);
            if is_kernel {
                let waits: Vec<Val> = inner
                    .iter()
                    .filter(|o| o.has(DB_CURRENT))
                    .filter_map(|o| match &o.kind {
                        OpKind::ExtractSlice { source, .. } => Some(root(*source)),
                        _ => None,
                    })
                    .collect();
                let at = inner.iter().position(|o| o.has(DB_PREFETCH)).map_or(0, |i| i + 1);
                for (i, buf) in waits.into_iter().enumerate() {
                    let tag = tag_for(p, tags, buf);
                    let w = p.op(OpKind::DmaWait { tag }).annotate("db_wait");
                    inner.insert(at + i, w);
                }
            }
            *op.kind.body_mut().unwrap() = inner;
        }
        out.push(op);
    }
    out
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::{compile_source, RowShape};
    use crate::interp::{interpret, interpret_with, FaultKind, InterpOptions, TensorValue, TraceEvent};
    use crate::ir::verify;
    use crate::passes::{tile_generic, TileSpec};

    fn tiled(n: usize, t: usize) -> KernelProgram {
        let p = compile_source("kernel k(x: row<f32>) -> (y: row<f32>) { y = tanh(x) * x; }", RowShape::one_d(n)).unwrap();
        tile_generic(&p, &TileSpec::with_sizes(vec![t], 1 << 20)).unwrap()
    }

    fn inputs(n: usize) -> crate::interp::NamedTensors {
        [("x".to_string(), TensorValue::from_fn(vec![n], |i| i as f32 / 7.0 - 2.0))].into_iter().collect()
    }

    #[test]
    fn structural_and_dma_preserve_results() {
        let p = tiled(100, 32);
        let want = interpret(&p, &inputs(100)).unwrap();
        let s = db_structural(&p).unwrap();
        assert!(verify(&s, Some(1 << 20)).is_ok(), "{}", verify(&s, None));
        assert_eq!(interpret(&s, &inputs(100)).unwrap(), want);
        let d = db_dma(&s).unwrap();
        assert!(verify(&d, Some(1 << 20)).is_ok(), "{}", verify(&d, None));
        assert_eq!(interpret(&d, &inputs(100)).unwrap(), want);
    }

    #[test]
    fn dma_trace_alternates_ping_pong() {
        let d = db_dma(&db_structural(&tiled(128, 32)).unwrap()).unwrap();
        let r = interpret_with(&d, &inputs(128), InterpOptions { trace: true, ..Default::default() }).unwrap();
        let loads: Vec<&str> = r
            .trace
            .iter()
            .filter_map(|e| match e {
                TraceEvent::DmaStart { tag, .. } if tag.starts_with("x_tile") => Some(tag.as_str()),
                _ => None,
            })
            .collect();
        assert_eq!(loads, ["x_tile_ping_tag", "x_tile_pong_tag", "x_tile_ping_tag", "x_tile_pong_tag"]);
    }

    #[test]
    fn missing_wait_faults() {
        let mut d = db_dma(&db_structural(&tiled(64, 32)).unwrap()).unwrap();
        fn strip(ops: &mut Vec<Op>) {
            ops.retain(|o| !o.has("db_wait"));
            for o in ops {
                if let Some(b) = o.kind.body_mut() {
                    strip(b);
                }
            }
        }
        strip(&mut d.body);
        let err = interpret(&d, &inputs(64)).unwrap_err();
        assert_eq!(err.kind, FaultKind::ReadBeforeDmaComplete);
    }

    #[test]
    fn dma_without_structural_rejected() {
        assert_eq!(db_dma(&tiled(64, 32)).unwrap_err(), PassError::DbAnnotationsAbsent);
    }
}
