//! Tiling of top-level generics over parallel dimensions, staging DDR operands
//! through TCM scratch buffers.
//!
//! A tiled generic becomes a loop nest over tile indices whose innermost body
//! is, per staged input: `extract_slice` of the source (`tile_src`), `alloc` of
//! a scratch buffer (`tile_alloc`), a view of it (`tile_view`) and a `copy`
//! (`tile_load`); the same alloc/view for outputs; the generic on the views;
//! then per output `extract_slice` of the destination (`tile_dst`) and a
//! `copy` back (`tile_store`); finally the deallocs (`tile_dealloc`).

use crate::ir::{
    GenericOp, IndexExpr, IteratorKind, KernelProgram, MemSpace, Op, OpKind, Role, Val,
};

use super::PassError;

pub const TILED_GENERIC: &str = "tiled_generic";
pub const ALL_PARALLEL: &str = "all_parallel";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TileSpec {
    /// Tile size per domain dimension, 0 = untiled. `None` picks the default
    /// per generic.
    pub sizes: Option<Vec<usize>>,
    /// Loop order, outermost first, as a permutation of the tiled dims.
    pub interchange: Option<Vec<usize>>,
    /// Where operand tiles live.
    pub space: MemSpace,
    pub tcm_bytes: usize,
}

impl TileSpec {
    pub fn default_for(tcm_bytes: usize) -> Self {
        Self { sizes: None, interchange: None, space: MemSpace::Tcm, tcm_bytes }
    }

    pub fn with_sizes(sizes: Vec<usize>, tcm_bytes: usize) -> Self {
        Self { sizes: Some(sizes), ..Self::default_for(tcm_bytes) }
    }
}

fn const_extents(g: &GenericOp) -> Option<Vec<usize>> {
    g.domain.iter().map(|e| e.constant().filter(|c| *c >= 1).map(|c| c as usize)).collect()
}

/// Operand box extents when each domain dim `d` spans `span[d]`.
fn operand_box(program: &KernelProgram, g: &GenericOp, k: usize, span: &[usize]) -> Vec<usize> {
    let (v, map) = g.operands().nth(k).unwrap();
    let shape = &program.decl(v).unwrap().shape;
    map.results.iter().enumerate().map(|(j, r)| r.map_or(shape[j], |d| span[d])).collect()
}

fn staged(program: &KernelProgram, v: Val, space: MemSpace) -> bool {
    space == MemSpace::Tcm && program.decl(v).is_some_and(|d| d.space == MemSpace::Ddr)
}

/// Bytes of TCM one set of tiles occupies.
fn tile_set_bytes(program: &KernelProgram, g: &GenericOp, span: &[usize], space: MemSpace) -> usize {
    g.operands()
        .enumerate()
        .filter(|(_, (v, _))| staged(program, *v, space))
        .map(|(k, (v, _))| {
            let elem = program.decl(v).unwrap().elem.bytes();
            operand_box(program, g, k, span).iter().product::<usize>() * elem
        })
        .sum()
}

/// Tiles the outermost parallel dim so that a ping and a pong set of operand
/// tiles fit in half the TCM.
pub fn default_tile_sizes(program: &KernelProgram, g: &GenericOp, tcm_bytes: usize) -> Vec<usize> {
    let mut sizes = vec![0; g.rank()];
    let (Some(ext), Some(d0)) = (const_extents(g), g.iterators.iter().position(|k| *k == IteratorKind::Parallel))
    else {
        return sizes;
    };
    let mut span = ext.clone();
    span[d0] = 1;
    let per_row = tile_set_bytes(program, g, &span, MemSpace::Tcm);
    span[d0] = 0;
    let fixed = tile_set_bytes(program, g, &span, MemSpace::Tcm);
    let per_unit = per_row - fixed;
    let t = (tcm_bytes / 4).saturating_sub(fixed).checked_div(per_unit).unwrap_or(ext[d0]);
    sizes[d0] = t.clamp(1, ext[d0]);
    sizes
}

pub fn tile_generic(program: &KernelProgram, spec: &TileSpec) -> Result<KernelProgram, PassError> {
    let mut out = program.clone();
    let body = std::mem::take(&mut out.body);
    for op in body {
        let Some(g) = op.as_generic() else {
            out.body.push(op);
            continue;
        };
        let Some(ext) = const_extents(g) else {
            out.body.push(op);
            continue;
        };
        let explicit = spec.sizes.is_some();
        let sizes: Vec<usize> = match &spec.sizes {
            Some(s) => (0..g.rank()).map(|d| s.get(d).copied().unwrap_or(0)).collect(),
            None => default_tile_sizes(program, g, spec.tcm_bytes),
        };
        for (d, &t) in sizes.iter().enumerate() {
            if t > 0 && g.iterators[d] == IteratorKind::Reduction {
                return Err(PassError::TileReduction { op: op.id, dim: d });
            }
        }
        let tiled: Vec<usize> = (0..g.rank()).filter(|d| sizes[*d] > 0).collect();
        let order = match &spec.interchange {
            Some(perm) => {
                let mut sorted = perm.clone();
                sorted.sort_unstable();
                if sorted != tiled {
                    return Err(PassError::BadTileSpec(format!(
                        "interchange {perm:?} is not a permutation of tiled dims {tiled:?}"
                    )));
                }
                perm.clone()
            }
            None => tiled.clone(),
        };
        let span: Vec<usize> = (0..g.rank()).map(|d| if sizes[d] > 0 { sizes[d].min(ext[d]) } else { ext[d] }).collect();
        let need = tile_set_bytes(program, g, &span, spec.space);
        if need > spec.tcm_bytes {
            if explicit {
                return Err(PassError::TcmBudget { op: op.id, need, budget: spec.tcm_bytes });
            }
            out.body.push(op);
            continue;
        }
        let g = g.clone();
        let nest = tile_one(&mut out, &op, &g, &ext, &sizes, &order, spec.space);
        out.body.extend(nest);
    }
    out.stage = "tile".into();
    Ok(out)
}

fn unique_name(program: &KernelProgram, base: &str) -> String {
    if program.decl_by_name(base).is_none() {
        return base.to_string();
    }
    (1..).map(|i| format!("{base}{i}")).find(|n| program.decl_by_name(n).is_none()).unwrap()
}

fn tile_one(
    prog: &mut KernelProgram,
    op: &Op,
    g: &GenericOp,
    ext: &[usize],
    sizes: &[usize],
    order: &[usize],
    space: MemSpace,
) -> Vec<Op> {
    let rank = g.rank();
    let vars: Vec<Option<crate::ir::Var>> =
        (0..rank).map(|d| (sizes[d] > 0).then(|| prog.fresh_var())).collect();
    let offset: Vec<IndexExpr> = (0..rank)
        .map(|d| match vars[d] {
            Some(v) => IndexExpr::mul(v, sizes[d] as i64),
            None => IndexExpr::Const(0),
        })
        .collect();
    let size: Vec<IndexExpr> = (0..rank)
        .map(|d| match vars[d] {
            Some(v) if !ext[d].is_multiple_of(sizes[d]) || sizes[d] > ext[d] => {
                let t = sizes[d].min(ext[d]) as i64;
                IndexExpr::min(t, IndexExpr::sub(ext[d] as i64, IndexExpr::mul(v, sizes[d] as i64)))
            }
            Some(_) => IndexExpr::Const(sizes[d] as i64),
            None => IndexExpr::Const(ext[d] as i64),
        })
        .collect();
    let nin = g.inputs.len();
    let mut head = Vec::new();
    let mut tail = Vec::new();
    let mut deallocs = Vec::new();
    let mut views = Vec::new();
    for (k, (v, map)) in g.operands().enumerate() {
        let decl = prog.decl(v).unwrap().clone();
        let mut offs = Vec::new();
        let mut szs = Vec::new();
        let mut maxs = Vec::new();
        for (j, r) in map.results.iter().enumerate() {
            match r {
                Some(d) => {
                    offs.push(offset[*d].clone());
                    szs.push(size[*d].clone());
                    maxs.push(if sizes[*d] > 0 { sizes[*d].min(ext[*d]) } else { ext[*d] });
                }
                None => {
                    offs.push(IndexExpr::Const(0));
                    szs.push(IndexExpr::Const(decl.shape[j] as i64));
                    maxs.push(decl.shape[j]);
                }
            }
        }
        let view = prog.fresh_val();
        if staged(prog, v, space) {
            let name = unique_name(prog, &format!("{}_tile", decl.name));
            let buf = prog.add_tensor(name, maxs, decl.elem, MemSpace::Tcm, Role::Scratch);
            let zeros = vec![IndexExpr::Const(0); offs.len()];
            let alloc = prog.op(OpKind::Alloc { buf }).annotate("tile_alloc");
            let view_op = prog
                .op(OpKind::ExtractSlice { result: view, source: buf, offsets: zeros, sizes: szs.clone() })
                .annotate("tile_view");
            let part = prog.fresh_val();
            let slice = |prog: &mut KernelProgram, ann: &str| {
                prog.op(OpKind::ExtractSlice { result: part, source: v, offsets: offs.clone(), sizes: szs.clone() })
                    .annotate(ann)
            };
            if k < nin {
                let src = slice(prog, "tile_src");
                let copy = prog.op(OpKind::Copy { src: part, dst: view }).annotate("tile_load");
                head.extend([src, alloc, view_op, copy]);
            } else {
                head.extend([alloc, view_op]);
                let dst = slice(prog, "tile_dst");
                let copy = prog.op(OpKind::Copy { src: view, dst: part }).annotate("tile_store");
                tail.extend([dst, copy]);
            }
            deallocs.push(prog.op(OpKind::Dealloc { buf }).annotate("tile_dealloc"));
        } else {
            head.push(prog.op(OpKind::ExtractSlice { result: view, source: v, offsets: offs, sizes: szs }));
        }
        views.push(view);
    }
    // Extents follow the views so later slicing of the views carries over.
    let domain = (0..rank)
        .map(|d| {
            (nin..views.len())
                .chain(0..nin)
                .find_map(|k| g.maps[k].axis_of(d).map(|a| IndexExpr::DimOf(views[k], a)))
                .unwrap_or_else(|| size[d].clone())
        })
        .collect();
    let inner = GenericOp {
        domain,
        inputs: views[..nin].to_vec(),
        outputs: views[nin..].to_vec(),
        ..g.clone()
    };
    let mut compute = prog.op(OpKind::Generic(inner));
    compute.annotations = op.annotations.clone();
    let mut body = head;
    body.push(compute);
    body.extend(tail);
    deallocs.reverse();
    body.extend(deallocs);
    for (depth, &d) in order.iter().enumerate().rev() {
        let trips = ext[d].div_ceil(sizes[d]) as i64;
        let mut l = prog.op(OpKind::For {
            var: vars[d].unwrap(),
            lb: IndexExpr::Const(0),
            ub: IndexExpr::Const(trips),
            step: 1,
            body,
        });
        if depth == order.len() - 1 {
            l = l.annotate(TILED_GENERIC).annotate(ALL_PARALLEL);
        }
        body = vec![l];
    }
    body
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::{compile_source, RowShape};
    use crate::ir::verify;

    fn unary(shape: RowShape) -> KernelProgram {
        compile_source("kernel k(x: row<f32>) -> (y: row<f32>) { y = x * 2.0; }", shape).unwrap()
    }

    #[test]
    fn clamped_remainder_tiles() {
        let p = tile_generic(&unary(RowShape::one_d(100)), &TileSpec::with_sizes(vec![32], 1 << 20)).unwrap();
        assert!(verify(&p, Some(1 << 20)).is_ok(), "{}", verify(&p, None));
        let OpKind::For { ub, .. } = &p.body[0].kind else { panic!() };
        assert_eq!(ub.constant(), Some(4));
        assert!(p.body[0].has(TILED_GENERIC) && p.body[0].has(ALL_PARALLEL));
    }

    #[test]
    fn default_tile_fits_ping_and_pong_in_half_the_tcm() {
        let p = unary(RowShape::one_d(1 << 20));
        let g = p.body[0].as_generic().unwrap();
        assert_eq!(default_tile_sizes(&p, g, 8 << 20), vec![262_144]);
    }

    #[test]
    fn reduction_dim_rejected() {
        let p = compile_source("kernel k(x: row<f32>) -> (y: scalar<f32>) { y = sum(x, axis=0); }", RowShape::two_d(4, 8))
            .unwrap();
        let err = tile_generic(&p, &TileSpec::with_sizes(vec![2, 4], 1 << 20)).unwrap_err();
        assert!(matches!(err, PassError::TileReduction { dim: 1, .. }));
        assert!(tile_generic(&p, &TileSpec::with_sizes(vec![2, 0], 1 << 20)).is_ok());
    }

    #[test]
    fn budget_enforced_for_explicit_sizes() {
        let err = tile_generic(&unary(RowShape::one_d(1024)), &TileSpec::with_sizes(vec![1024], 4096)).unwrap_err();
        assert!(matches!(err, PassError::TcmBudget { need: 8192, .. }));
    }

    #[test]
    fn interchange_must_permute_tiled_dims() {
        let p = unary(RowShape::two_d(8, 8));
        let spec = TileSpec { interchange: Some(vec![1, 0]), ..TileSpec::with_sizes(vec![4, 4], 1 << 20) };
        let t = tile_generic(&p, &spec).unwrap();
        assert!(verify(&t, None).is_ok());
        let bad = TileSpec { interchange: Some(vec![0]), ..spec };
        assert!(matches!(tile_generic(&p, &bad), Err(PassError::BadTileSpec(_))));
    }
}
