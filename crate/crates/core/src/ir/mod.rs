//! Kernel IR: tensor declarations, generic ops and the structured loop/DMA/async layer.
//!
//! Values (`Val`) name buffers declared on the program, views produced by
//! `extract_slice`, DMA tags, toggle cells, async tokens and groups. Loop
//! induction variables (`Var`) live in a separate namespace and only appear
//! inside [`IndexExpr`]s. Programs are plain data: passes consume a program and
//! return a new one.

mod index;
mod payload;
mod print;
mod verify;

use std::collections::{BTreeSet, HashMap};
use std::fmt;

pub use index::{IndexEvalError, IndexExpr, Pred};
pub use payload::{max2, BinaryOp, PayloadExpr, UnaryOp};
pub use print::print_ir;
pub use verify::{tcm_peak_bytes, verify, VerifyReport, Violation};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Val(pub u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct OpId(pub u32);

impl fmt::Display for Val {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "%{}", self.0)
    }
}

impl fmt::Display for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "%i{}", self.0)
    }
}

impl fmt::Display for OpId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "op#{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MemSpace {
    Ddr,
    Tcm,
}

impl fmt::Display for MemSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MemSpace::Ddr => "ddr",
            MemSpace::Tcm => "tcm",
        })
    }
}

/// Element type. `F16` is stored and computed as f32; only the cost model
/// distinguishes the two.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ElemType {
    F32,
    F16,
}

impl ElemType {
    pub fn bytes(self) -> usize {
        match self {
            ElemType::F32 => 4,
            ElemType::F16 => 2,
        }
    }

    pub fn is_narrow(self) -> bool {
        self == ElemType::F16
    }
}

impl fmt::Display for ElemType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ElemType::F32 => "f32",
            ElemType::F16 => "f16",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    Input,
    Output,
    /// Intermediate result of the kernel.
    Temp,
    /// Staging buffer introduced by a pass; only live between alloc and dealloc.
    Scratch,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Input => "input",
            Role::Output => "output",
            Role::Temp => "temp",
            Role::Scratch => "scratch",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorDecl {
    pub id: Val,
    pub name: String,
    pub shape: Vec<usize>,
    pub elem: ElemType,
    pub space: MemSpace,
    pub role: Role,
}

impl TensorDecl {
    pub fn num_elements(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn bytes(&self) -> usize {
        self.num_elements() * self.elem.bytes()
    }
}

/// A DMA completion tag.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TagDecl {
    pub id: Val,
    pub name: String,
}

/// A memory-resident boolean cell, used to select ping or pong buffers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ToggleDecl {
    pub id: Val,
    pub name: String,
}

/// Projection/permutation map from the iteration domain into an operand.
///
/// `results[j]` names the domain dimension indexing operand axis `j`; `None`
/// pins that axis to 0 (a size-1 broadcast axis). Domain dimensions not named
/// by any result are broadcast along.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct AffineIndexMap {
    pub results: Vec<Option<usize>>,
}

impl AffineIndexMap {
    pub fn identity(rank: usize) -> Self {
        Self { results: (0..rank).map(Some).collect() }
    }

    pub fn new(results: Vec<Option<usize>>) -> Self {
        Self { results }
    }

    pub fn is_identity(&self, rank: usize) -> bool {
        self.results.len() == rank && self.results.iter().enumerate().all(|(j, r)| *r == Some(j))
    }

    /// Operand axis reading domain dimension `dim`, if any.
    pub fn axis_of(&self, dim: usize) -> Option<usize> {
        self.results.iter().position(|r| *r == Some(dim))
    }

    pub fn uses_dim(&self, dim: usize) -> bool {
        self.axis_of(dim).is_some()
    }

    /// Renders as `(d0, d1) -> (d0, _)` for a domain of the given rank.
    pub fn display(&self, rank: usize) -> String {
        let dims: Vec<String> = (0..rank).map(|d| format!("d{d}")).collect();
        let res: Vec<String> = self
            .results
            .iter()
            .map(|r| r.map_or_else(|| "_".to_string(), |d| format!("d{d}")))
            .collect();
        format!("({}) -> ({})", dims.join(", "), res.join(", "))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum IteratorKind {
    Parallel,
    Reduction,
}

impl fmt::Display for IteratorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            IteratorKind::Parallel => "parallel",
            IteratorKind::Reduction => "reduction",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ReductionKind {
    Sum,
    Max,
}

impl ReductionKind {
    pub fn init(self) -> f32 {
        match self {
            ReductionKind::Sum => 0.0,
            ReductionKind::Max => f32::NEG_INFINITY,
        }
    }

    #[inline]
    pub fn combine(self, acc: f32, v: f32) -> f32 {
        match self {
            ReductionKind::Sum => acc + v,
            ReductionKind::Max => max2(acc, v),
        }
    }
}

impl fmt::Display for ReductionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReductionKind::Sum => "sum",
            ReductionKind::Max => "max",
        })
    }
}

/// Structured tensor op: domain, one map per operand (inputs then outputs),
/// iterator kinds and one payload per output.
///
/// Outputs with a reduction combinator are initialised to the combinator's
/// identity and folded in ascending domain order; the payload yields the value
/// folded at each point.
#[derive(Clone, Debug, PartialEq)]
pub struct GenericOp {
    pub domain: Vec<IndexExpr>,
    pub iterators: Vec<IteratorKind>,
    pub inputs: Vec<Val>,
    pub outputs: Vec<Val>,
    pub maps: Vec<AffineIndexMap>,
    pub payloads: Vec<PayloadExpr>,
    pub reductions: Vec<Option<ReductionKind>>,
}

impl GenericOp {
    pub fn rank(&self) -> usize {
        self.domain.len()
    }

    pub fn is_all_parallel(&self) -> bool {
        self.iterators.iter().all(|k| *k == IteratorKind::Parallel)
    }

    pub fn input_map(&self, i: usize) -> &AffineIndexMap {
        &self.maps[i]
    }

    pub fn output_map(&self, i: usize) -> &AffineIndexMap {
        &self.maps[self.inputs.len() + i]
    }

    pub fn operands(&self) -> impl Iterator<Item = (Val, &AffineIndexMap)> {
        self.inputs.iter().chain(self.outputs.iter()).copied().zip(self.maps.iter())
    }

    /// Static domain size, when every extent is a constant.
    pub fn static_points(&self) -> Option<i64> {
        self.domain.iter().map(|e| e.constant()).product()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    Generic(GenericOp),
    For { var: Var, lb: IndexExpr, ub: IndexExpr, step: i64, body: Vec<Op> },
    Forall { var: Var, num_threads: usize, body: Vec<Op> },
    If { pred: Pred, then_body: Vec<Op> },
    /// View of `source` at `offsets` with extents `sizes` (rank preserving).
    ExtractSlice { result: Val, source: Val, offsets: Vec<IndexExpr>, sizes: Vec<IndexExpr> },
    Copy { src: Val, dst: Val },
    Alloc { buf: Val },
    Dealloc { buf: Val },
    DmaStart { src: Val, dst: Val, tag: Val },
    DmaWait { tag: Val },
    AsyncGroup { group: Val, size: IndexExpr },
    AsyncExecute { token: Val, body: Vec<Op> },
    AddToGroup { group: Val, token: Val },
    AwaitAll { group: Val },
    StoreToggle { cell: Val, value: IndexExpr },
    LoadToggle { cell: Val, result: Var },
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Generic(_) => "generic",
            OpKind::For { .. } => "for",
            OpKind::Forall { .. } => "forall",
            OpKind::If { .. } => "if",
            OpKind::ExtractSlice { .. } => "extract_slice",
            OpKind::Copy { .. } => "copy",
            OpKind::Alloc { .. } => "alloc",
            OpKind::Dealloc { .. } => "dealloc",
            OpKind::DmaStart { .. } => "dma_start",
            OpKind::DmaWait { .. } => "dma_wait",
            OpKind::AsyncGroup { .. } => "async_group",
            OpKind::AsyncExecute { .. } => "async_execute",
            OpKind::AddToGroup { .. } => "add_to_group",
            OpKind::AwaitAll { .. } => "await_all",
            OpKind::StoreToggle { .. } => "store_toggle",
            OpKind::LoadToggle { .. } => "load_toggle",
        }
    }

    pub fn body(&self) -> Option<&Vec<Op>> {
        match self {
            OpKind::For { body, .. }
            | OpKind::Forall { body, .. }
            | OpKind::AsyncExecute { body, .. }
            | OpKind::If { then_body: body, .. } => Some(body),
            _ => None,
        }
    }

    pub fn body_mut(&mut self) -> Option<&mut Vec<Op>> {
        match self {
            OpKind::For { body, .. }
            | OpKind::Forall { body, .. }
            | OpKind::AsyncExecute { body, .. }
            | OpKind::If { then_body: body, .. } => Some(body),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Op {
    pub id: OpId,
    pub kind: OpKind,
    pub annotations: BTreeSet<String>,
}

impl Op {
    pub fn has(&self, annotation: &str) -> bool {
        self.annotations.contains(annotation)
    }

    /// Annotation starting with `prefix`, e.g. `vectorized(` or `db_generic=`.
    pub fn annotation_with_prefix(&self, prefix: &str) -> Option<&str> {
        self.annotations.iter().find(|a| a.starts_with(prefix)).map(String::as_str)
    }

    pub fn annotate(mut self, a: impl Into<String>) -> Self {
        self.annotations.insert(a.into());
        self
    }

    pub fn as_generic(&self) -> Option<&GenericOp> {
        match &self.kind {
            OpKind::Generic(g) => Some(g),
            _ => None,
        }
    }
}

/// Whole kernel at some pipeline stage.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelProgram {
    pub name: String,
    pub stage: String,
    pub decls: Vec<TensorDecl>,
    pub tags: Vec<TagDecl>,
    pub toggles: Vec<ToggleDecl>,
    pub body: Vec<Op>,
    next_val: u32,
    next_var: u32,
    next_op: u32,
}

impl KernelProgram {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            stage: "input".into(),
            decls: Vec::new(),
            tags: Vec::new(),
            toggles: Vec::new(),
            body: Vec::new(),
            next_val: 0,
            next_var: 0,
            next_op: 0,
        }
    }

    pub fn fresh_val(&mut self) -> Val {
        let v = Val(self.next_val);
        self.next_val += 1;
        v
    }

    pub fn fresh_var(&mut self) -> Var {
        let v = Var(self.next_var);
        self.next_var += 1;
        v
    }

    pub fn op(&mut self, kind: OpKind) -> Op {
        let id = OpId(self.next_op);
        self.next_op += 1;
        Op { id, kind, annotations: BTreeSet::new() }
    }

    pub fn add_tensor(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        elem: ElemType,
        space: MemSpace,
        role: Role,
    ) -> Val {
        let id = self.fresh_val();
        self.decls.push(TensorDecl { id, name: name.into(), shape, elem, space, role });
        id
    }

    pub fn add_tag(&mut self, name: impl Into<String>) -> Val {
        let id = self.fresh_val();
        self.tags.push(TagDecl { id, name: name.into() });
        id
    }

    pub fn add_toggle(&mut self, name: impl Into<String>) -> Val {
        let id = self.fresh_val();
        self.toggles.push(ToggleDecl { id, name: name.into() });
        id
    }

    pub fn decl(&self, v: Val) -> Option<&TensorDecl> {
        self.decls.iter().find(|d| d.id == v)
    }

    pub fn decl_mut(&mut self, v: Val) -> Option<&mut TensorDecl> {
        self.decls.iter_mut().find(|d| d.id == v)
    }

    pub fn decl_by_name(&self, name: &str) -> Option<&TensorDecl> {
        self.decls.iter().find(|d| d.name == name)
    }

    pub fn is_tag(&self, v: Val) -> bool {
        self.tags.iter().any(|t| t.id == v)
    }

    pub fn is_toggle(&self, v: Val) -> bool {
        self.toggles.iter().any(|t| t.id == v)
    }

    pub fn inputs(&self) -> impl Iterator<Item = &TensorDecl> {
        self.decls.iter().filter(|d| d.role == Role::Input)
    }

    pub fn outputs(&self) -> impl Iterator<Item = &TensorDecl> {
        self.decls.iter().filter(|d| d.role == Role::Output)
    }

    pub fn remove_decl(&mut self, v: Val) {
        self.decls.retain(|d| d.id != v);
    }

    /// Pre-order walk over every op with its nesting depth.
    pub fn walk(&self, f: &mut dyn FnMut(&Op, usize)) {
        walk_ops(&self.body, 0, f);
    }

    pub fn count_ops(&self, pred: impl Fn(&Op) -> bool) -> usize {
        let mut n = 0;
        self.walk(&mut |op, _| {
            if pred(op) {
                n += 1;
            }
        });
        n
    }

    /// Clones `ops` with every value defined inside them, every loop variable
    /// bound inside them and every op id renamed to fresh ones. Uses of values
    /// defined outside are rewritten through `subst` (identity when absent).
    pub fn clone_ops(&mut self, ops: &[Op], subst: &mut HashMap<Val, Val>, vars: &mut HashMap<Var, Var>) -> Vec<Op> {
        ops.iter().map(|op| self.clone_op(op, subst, vars)).collect()
    }

    fn clone_op(&mut self, op: &Op, subst: &mut HashMap<Val, Val>, vars: &mut HashMap<Var, Var>) -> Op {
        let kind = match &op.kind {
            OpKind::For { var, lb, ub, step, body } => {
                let (lb, ub) = (remap_expr(lb, subst, vars), remap_expr(ub, subst, vars));
                let nv = self.fresh_var();
                vars.insert(*var, nv);
                let body = self.clone_ops(body, subst, vars);
                OpKind::For { var: nv, lb, ub, step: *step, body }
            }
            OpKind::Forall { var, num_threads, body } => {
                let nv = self.fresh_var();
                vars.insert(*var, nv);
                let body = self.clone_ops(body, subst, vars);
                OpKind::Forall { var: nv, num_threads: *num_threads, body }
            }
            OpKind::If { pred, then_body } => {
                let pred = pred.map(|e| remap_expr(e, subst, vars));
                OpKind::If { pred, then_body: self.clone_ops(then_body, subst, vars) }
            }
            OpKind::AsyncExecute { token, body } => {
                let body = self.clone_ops(body, subst, vars);
                let nt = self.fresh_val();
                subst.insert(*token, nt);
                OpKind::AsyncExecute { token: nt, body }
            }
            OpKind::ExtractSlice { result, source, offsets, sizes } => {
                let source = lookup(subst, *source);
                let offsets = offsets.iter().map(|e| remap_expr(e, subst, vars)).collect();
                let sizes = sizes.iter().map(|e| remap_expr(e, subst, vars)).collect();
                let nr = self.fresh_val();
                subst.insert(*result, nr);
                OpKind::ExtractSlice { result: nr, source, offsets, sizes }
            }
            OpKind::AsyncGroup { group, size } => {
                let size = remap_expr(size, subst, vars);
                let ng = self.fresh_val();
                subst.insert(*group, ng);
                OpKind::AsyncGroup { group: ng, size }
            }
            OpKind::LoadToggle { cell, result } => {
                let nv = self.fresh_var();
                vars.insert(*result, nv);
                OpKind::LoadToggle { cell: lookup(subst, *cell), result: nv }
            }
            OpKind::Generic(g) => OpKind::Generic(GenericOp {
                domain: g.domain.iter().map(|e| remap_expr(e, subst, vars)).collect(),
                inputs: g.inputs.iter().map(|v| lookup(subst, *v)).collect(),
                outputs: g.outputs.iter().map(|v| lookup(subst, *v)).collect(),
                ..g.clone()
            }),
            OpKind::Copy { src, dst } => OpKind::Copy { src: lookup(subst, *src), dst: lookup(subst, *dst) },
            OpKind::Alloc { buf } => OpKind::Alloc { buf: lookup(subst, *buf) },
            OpKind::Dealloc { buf } => OpKind::Dealloc { buf: lookup(subst, *buf) },
            OpKind::DmaStart { src, dst, tag } => OpKind::DmaStart {
                src: lookup(subst, *src),
                dst: lookup(subst, *dst),
                tag: lookup(subst, *tag),
            },
            OpKind::DmaWait { tag } => OpKind::DmaWait { tag: lookup(subst, *tag) },
            OpKind::AddToGroup { group, token } => {
                OpKind::AddToGroup { group: lookup(subst, *group), token: lookup(subst, *token) }
            }
            OpKind::AwaitAll { group } => OpKind::AwaitAll { group: lookup(subst, *group) },
            OpKind::StoreToggle { cell, value } => {
                OpKind::StoreToggle { cell: lookup(subst, *cell), value: remap_expr(value, subst, vars) }
            }
        };
        let mut new = self.op(kind);
        new.annotations = op.annotations.clone();
        new
    }
}

fn lookup(subst: &HashMap<Val, Val>, v: Val) -> Val {
    subst.get(&v).copied().unwrap_or(v)
}

fn remap_expr(e: &IndexExpr, subst: &HashMap<Val, Val>, vars: &HashMap<Var, Var>) -> IndexExpr {
    e.remap(&|v| vars.get(&v).copied().unwrap_or(v), &|v| lookup(subst, v))
}

pub fn walk_ops(ops: &[Op], depth: usize, f: &mut dyn FnMut(&Op, usize)) {
    for op in ops {
        f(op, depth);
        if let Some(body) = op.kind.body() {
            walk_ops(body, depth + 1, f);
        }
    }
}

/// Every value used (read or written) by an op, excluding values it defines.
pub fn op_uses(kind: &OpKind) -> Vec<Val> {
    let mut out = Vec::new();
    let exprs = |es: &[IndexExpr], out: &mut Vec<Val>| es.iter().for_each(|e| e.vals(out));
    match kind {
        OpKind::Generic(g) => {
            out.extend(g.inputs.iter().chain(&g.outputs));
            exprs(&g.domain, &mut out);
        }
        OpKind::For { lb, ub, .. } => {
            lb.vals(&mut out);
            ub.vals(&mut out);
        }
        OpKind::Forall { .. } | OpKind::AsyncExecute { .. } => {}
        OpKind::If { pred, .. } => pred.exprs().iter().for_each(|e| e.vals(&mut out)),
        OpKind::ExtractSlice { source, offsets, sizes, .. } => {
            out.push(*source);
            exprs(offsets, &mut out);
            exprs(sizes, &mut out);
        }
        OpKind::Copy { src, dst } => out.extend([*src, *dst]),
        OpKind::Alloc { buf } | OpKind::Dealloc { buf } => out.push(*buf),
        OpKind::DmaStart { src, dst, tag } => out.extend([*src, *dst, *tag]),
        OpKind::DmaWait { tag } => out.push(*tag),
        OpKind::AsyncGroup { size, .. } => size.vals(&mut out),
        OpKind::AddToGroup { group, token } => out.extend([*group, *token]),
        OpKind::AwaitAll { group } => out.push(*group),
        OpKind::StoreToggle { cell, value } => {
            out.push(*cell);
            value.vals(&mut out);
        }
        OpKind::LoadToggle { cell, .. } => out.push(*cell),
    }
    out
}
