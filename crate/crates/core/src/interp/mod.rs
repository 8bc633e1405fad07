//! Reference interpreter. Executes a program at any pipeline stage and is the
//! oracle for every semantic-preservation check.
//!
//! DMA is modeled as a snapshot of the source at `dma_start` that lands in the
//! destination at the matching `dma_wait`. Until then the destination region
//! is pending and any access to it faults.

mod tensor;

use std::collections::{HashMap, HashSet};
use std::fmt;

use thiserror::Error;

use crate::ir::{GenericOp, IndexExpr, KernelProgram, Op, OpId, OpKind, Pred, Role, Val, Var};

pub use tensor::{
    compare_outputs, parse_tensor_csv, read_tensor, read_tensor_bin, read_tensor_csv, write_tensor_bin,
    CompareError, CompareMode, CompareReport, NamedTensors, Offender, TensorIoError, TensorValue,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FaultKind {
    InputMismatch,
    Index,
    OutOfBounds,
    /// Read of a region whose filling DMA has not been waited on.
    ReadBeforeDmaComplete,
    /// Write to a region with a DMA in flight into it.
    WriteDuringDma,
    TagInFlight,
    TagIdle,
    TagLeak,
    Toggle,
    Unallocated,
    DoubleAlloc,
    Leak,
    Token,
    Group,
    /// Two concurrent bodies wrote the same element.
    Race,
}

impl fmt::Display for FaultKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FaultKind::InputMismatch => "input mismatch",
            FaultKind::Index => "index evaluation",
            FaultKind::OutOfBounds => "out-of-bounds access",
            FaultKind::ReadBeforeDmaComplete => "read before dma complete",
            FaultKind::WriteDuringDma => "write during dma",
            FaultKind::TagInFlight => "tag already in flight",
            FaultKind::TagIdle => "wait on idle tag",
            FaultKind::TagLeak => "dma never waited",
            FaultKind::Toggle => "toggle",
            FaultKind::Unallocated => "unallocated buffer",
            FaultKind::DoubleAlloc => "double alloc",
            FaultKind::Leak => "buffer leak",
            FaultKind::Token => "token discipline",
            FaultKind::Group => "group discipline",
            FaultKind::Race => "write race",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub struct ExecError {
    pub op: Option<OpId>,
    pub kind: FaultKind,
    pub detail: String,
}

impl fmt::Display for ExecError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.op {
            Some(op) => write!(f, "{op}: {}: {}", self.kind, self.detail),
            None => write!(f, "{}: {}", self.kind, self.detail),
        }
    }
}

fn fault(op: Option<OpId>, kind: FaultKind, detail: impl Into<String>) -> ExecError {
    ExecError { op, kind, detail: detail.into() }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct InterpOptions {
    /// Run forall iterations and async bodies on OS threads.
    pub threaded: bool,
    pub trace: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TraceEvent {
    DmaStart { op: OpId, tag: String, bytes: usize },
    DmaWait { op: OpId, tag: String },
    ToggleLoad { op: OpId, value: i64 },
    /// A taken `if` carrying annotations.
    Branch { op: OpId, annotations: Vec<String> },
    Generic { op: OpId, points: usize },
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExecResult {
    pub outputs: NamedTensors,
    pub trace: Vec<TraceEvent>,
}

/// Interprets sequentially without tracing.
pub fn interpret(program: &KernelProgram, inputs: &NamedTensors) -> Result<NamedTensors, ExecError> {
    interpret_with(program, inputs, InterpOptions::default()).map(|r| r.outputs)
}

pub fn interpret_with(
    program: &KernelProgram,
    inputs: &NamedTensors,
    opts: InterpOptions,
) -> Result<ExecResult, ExecError> {
    let mut base = HashMap::new();
    for d in &program.decls {
        match d.role {
            Role::Input => {
                let t = inputs
                    .get(&d.name)
                    .ok_or_else(|| fault(None, FaultKind::InputMismatch, format!("missing input `{}`", d.name)))?;
                if t.shape != d.shape {
                    return Err(fault(
                        None,
                        FaultKind::InputMismatch,
                        format!("input `{}` has shape {:?}, expected {:?}", d.name, t.shape, d.shape),
                    ));
                }
                base.insert(d.id, t.data.clone());
            }
            Role::Output | Role::Temp => {
                base.insert(d.id, vec![f32::NAN; d.num_elements()]);
            }
            Role::Scratch => {}
        }
    }
    let mut m = Machine::new(program, Store::Owned(base), opts);
    m.exec_block(&program.body)?;
    m.finish()?;
    let Store::Owned(mut base) = m.store else { unreachable!() };
    let outputs = program
        .outputs()
        .map(|d| (d.name.clone(), TensorValue { shape: d.shape.clone(), data: base.remove(&d.id).unwrap() }))
        .collect();
    Ok(ExecResult { outputs, trace: m.trace })
}

/// Rectangular region of a root buffer.
#[derive(Clone, Debug, PartialEq, Eq)]
struct View {
    root: Val,
    offsets: Vec<usize>,
    shape: Vec<usize>,
}

impl View {
    fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    fn overlaps(&self, other: &View) -> bool {
        self.root == other.root
            && self.numel() > 0
            && other.numel() > 0
            && (0..self.shape.len()).all(|j| {
                self.offsets[j] < other.offsets[j] + other.shape[j] && other.offsets[j] < self.offsets[j] + self.shape[j]
            })
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for j in (0..shape.len().saturating_sub(1)).rev() {
        s[j] = s[j + 1] * shape[j + 1];
    }
    s
}

type Buffers = HashMap<Val, Vec<f32>>;

enum Store<'s> {
    Owned(Buffers),
    /// Copy-on-write layer over a shared base, with per-element dirty bits.
    Overlay { base: &'s Buffers, local: HashMap<Val, (Vec<f32>, Vec<bool>)>, freed: HashSet<Val> },
}

impl Store<'_> {
    fn get(&self, root: Val) -> Option<&[f32]> {
        match self {
            Store::Owned(b) => b.get(&root).map(Vec::as_slice),
            Store::Overlay { base, local, freed } => match local.get(&root) {
                Some((d, _)) => Some(d),
                None if freed.contains(&root) => None,
                None => base.get(&root).map(Vec::as_slice),
            },
        }
    }

    fn insert(&mut self, root: Val, data: Vec<f32>) {
        match self {
            Store::Owned(b) => {
                b.insert(root, data);
            }
            Store::Overlay { local, freed, .. } => {
                freed.remove(&root);
                let n = data.len();
                local.insert(root, (data, vec![false; n]));
            }
        }
    }

    fn remove(&mut self, root: Val) {
        match self {
            Store::Owned(b) => {
                b.remove(&root);
            }
            Store::Overlay { local, freed, .. } => {
                local.remove(&root);
                freed.insert(root);
            }
        }
    }

    /// Writes `vals` at the given flat positions of `root`.
    fn scatter(&mut self, root: Val, positions: impl Iterator<Item = (usize, f32)>) {
        match self {
            Store::Owned(b) => {
                let buf = b.get_mut(&root).expect("checked before write");
                for (i, v) in positions {
                    buf[i] = v;
                }
            }
            Store::Overlay { base, local, .. } => {
                let (buf, dirty) = local.entry(root).or_insert_with(|| {
                    let d = base.get(&root).expect("checked before write").clone();
                    let n = d.len();
                    (d, vec![false; n])
                });
                for (i, v) in positions {
                    buf[i] = v;
                    dirty[i] = true;
                }
            }
        }
    }
}

struct InFlight {
    dst: View,
    data: Vec<f32>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum TokenState {
    Deferred,
    Done,
}

struct Token {
    /// Dynamic instance; a token issued inside a loop is a new instance per iteration.
    instance: u64,
    state: TokenState,
    group: Option<Val>,
    awaited: bool,
    op: OpId,
}

struct Group {
    size: i64,
    members: Vec<u64>,
    awaited: bool,
}

/// A body waiting to run on a worker thread.
struct Deferred<'p> {
    body: &'p [Op],
    vars: HashMap<Var, i64>,
    views: HashMap<Val, View>,
}

struct Machine<'p, 's> {
    prog: &'p KernelProgram,
    store: Store<'s>,
    opts: InterpOptions,
    vars: HashMap<Var, i64>,
    views: HashMap<Val, View>,
    allocated: HashSet<Val>,
    dma: HashMap<Val, InFlight>,
    toggles: HashMap<Val, i64>,
    tokens: HashMap<Val, Token>,
    groups: HashMap<Val, Group>,
    deferred: HashMap<u64, Deferred<'p>>,
    next_instance: u64,
    trace: Vec<TraceEvent>,
}

impl<'p, 's> Machine<'p, 's> {
    fn new(prog: &'p KernelProgram, store: Store<'s>, opts: InterpOptions) -> Self {
        Self {
            prog,
            store,
            opts,
            vars: HashMap::new(),
            views: HashMap::new(),
            allocated: HashSet::new(),
            dma: HashMap::new(),
            toggles: HashMap::new(),
            tokens: HashMap::new(),
            groups: HashMap::new(),
            deferred: HashMap::new(),
            next_instance: 0,
            trace: Vec::new(),
        }
    }

    fn tag_name(&self, tag: Val) -> String {
        self.prog.tags.iter().find(|t| t.id == tag).map_or_else(|| tag.to_string(), |t| t.name.clone())
    }

    fn eval(&self, e: &IndexExpr, op: OpId) -> Result<i64, ExecError> {
        e.eval(&|v| self.vars.get(&v).copied(), &|v, axis| {
            self.resolve(v, op).ok().and_then(|view| view.shape.get(axis).map(|&s| s as i64))
        })
        .map_err(|err| fault(Some(op), FaultKind::Index, err.to_string()))
    }

    fn eval_pred(&self, p: &Pred, op: OpId) -> Result<bool, ExecError> {
        let [a, b] = p.exprs();
        let (a, b) = (self.eval(a, op)?, self.eval(b, op)?);
        Ok(match p {
            Pred::Lt(..) => a < b,
            Pred::Eq(..) => a == b,
        })
    }

    fn resolve(&self, v: Val, op: OpId) -> Result<View, ExecError> {
        if let Some(view) = self.views.get(&v) {
            if self.store.get(view.root).is_none() {
                return Err(fault(Some(op), FaultKind::Unallocated, format!("{v} views released buffer {}", view.root)));
            }
            return Ok(view.clone());
        }
        let d = self
            .prog
            .decl(v)
            .ok_or_else(|| fault(Some(op), FaultKind::Unallocated, format!("{v} is not a buffer or view")))?;
        if self.store.get(v).is_none() {
            return Err(fault(Some(op), FaultKind::Unallocated, format!("buffer `{}` used outside alloc/dealloc", d.name)));
        }
        Ok(View { root: v, offsets: vec![0; d.shape.len()], shape: d.shape.clone() })
    }

    fn root_shape(&self, root: Val) -> &[usize] {
        &self.prog.decl(root).expect("views root at declarations").shape
    }

    fn check_read(&self, view: &View, op: OpId) -> Result<(), ExecError> {
        for (tag, f) in &self.dma {
            if f.dst.overlaps(view) {
                return Err(fault(
                    Some(op),
                    FaultKind::ReadBeforeDmaComplete,
                    format!("reads `{}` while tag `{}` is in flight", self.root_name(view.root), self.tag_name(*tag)),
                ));
            }
        }
        Ok(())
    }

    fn check_write(&self, view: &View, op: OpId) -> Result<(), ExecError> {
        for (tag, f) in &self.dma {
            if f.dst.overlaps(view) {
                return Err(fault(
                    Some(op),
                    FaultKind::WriteDuringDma,
                    format!("writes `{}` while tag `{}` is in flight", self.root_name(view.root), self.tag_name(*tag)),
                ));
            }
        }
        Ok(())
    }

    fn root_name(&self, root: Val) -> String {
        self.prog.decl(root).map_or_else(|| root.to_string(), |d| d.name.clone())
    }

    fn flat_positions(&self, view: &View) -> Vec<usize> {
        let rs = strides(self.root_shape(view.root));
        let n = view.numel();
        let mut out = Vec::with_capacity(n);
        let mut idx = vec![0usize; view.shape.len()];
        for _ in 0..n {
            out.push(idx.iter().enumerate().map(|(j, &i)| (view.offsets[j] + i) * rs[j]).sum());
            for j in (0..idx.len()).rev() {
                idx[j] += 1;
                if idx[j] < view.shape[j] {
                    break;
                }
                idx[j] = 0;
            }
        }
        out
    }

    fn gather(&self, view: &View) -> Vec<f32> {
        let buf = self.store.get(view.root).expect("resolved view");
        self.flat_positions(view).into_iter().map(|i| buf[i]).collect()
    }

    fn scatter(&mut self, view: &View, data: &[f32]) {
        let pos = self.flat_positions(view);
        self.store.scatter(view.root, pos.into_iter().zip(data.iter().copied()));
    }

    fn exec_block(&mut self, ops: &'p [Op]) -> Result<(), ExecError> {
        for op in ops {
            self.exec(op)?;
        }
        Ok(())
    }

    fn exec(&mut self, op: &'p Op) -> Result<(), ExecError> {
        let id = op.id;
        match &op.kind {
            OpKind::Generic(g) => self.exec_generic(id, g),
            OpKind::For { var, lb, ub, step, body } => {
                let (lb, ub) = (self.eval(lb, id)?, self.eval(ub, id)?);
                if *step < 1 {
                    return Err(fault(Some(id), FaultKind::Index, format!("loop step {step}")));
                }
                let mut i = lb;
                while i < ub {
                    self.vars.insert(*var, i);
                    self.exec_block(body)?;
                    i += step;
                }
                self.vars.remove(var);
                Ok(())
            }
            OpKind::Forall { var, num_threads, body } => {
                if self.opts.threaded {
                    let jobs = (0..*num_threads as i64)
                        .map(|t| {
                            let mut vars = self.vars.clone();
                            vars.insert(*var, t);
                            Deferred { body: body.as_slice(), vars, views: self.views.clone() }
                        })
                        .collect();
                    self.run_concurrently(id, jobs)
                } else {
                    for t in 0..*num_threads as i64 {
                        self.vars.insert(*var, t);
                        self.exec_block(body)?;
                    }
                    self.vars.remove(var);
                    Ok(())
                }
            }
            OpKind::If { pred, then_body } => {
                if self.eval_pred(pred, id)? {
                    if self.opts.trace && !op.annotations.is_empty() {
                        self.trace.push(TraceEvent::Branch { op: id, annotations: op.annotations.iter().cloned().collect() });
                    }
                    self.exec_block(then_body)?;
                }
                Ok(())
            }
            OpKind::ExtractSlice { result, source, offsets, sizes } => {
                let src = self.resolve(*source, id)?;
                let offs = offsets.iter().map(|e| self.eval(e, id)).collect::<Result<Vec<_>, _>>()?;
                let sizes = sizes.iter().map(|e| self.eval(e, id)).collect::<Result<Vec<_>, _>>()?;
                if offs.len() != src.shape.len() || sizes.len() != src.shape.len() {
                    return Err(fault(Some(id), FaultKind::OutOfBounds, "slice rank differs from source"));
                }
                let mut view = View { root: src.root, offsets: Vec::new(), shape: Vec::new() };
                for j in 0..offs.len() {
                    if offs[j] < 0 || sizes[j] < 0 || (offs[j] + sizes[j]) as usize > src.shape[j] {
                        return Err(fault(
                            Some(id),
                            FaultKind::OutOfBounds,
                            format!(
                                "slice [{}+{}] exceeds extent {} of axis {j} of `{}`",
                                offs[j],
                                sizes[j],
                                src.shape[j],
                                self.root_name(src.root)
                            ),
                        ));
                    }
                    view.offsets.push(src.offsets[j] + offs[j] as usize);
                    view.shape.push(sizes[j] as usize);
                }
                self.views.insert(*result, view);
                Ok(())
            }
            OpKind::Copy { src, dst } => {
                let (s, d) = (self.resolve(*src, id)?, self.resolve(*dst, id)?);
                if s.shape != d.shape {
                    return Err(fault(Some(id), FaultKind::OutOfBounds, format!("copy {:?} into {:?}", s.shape, d.shape)));
                }
                self.check_read(&s, id)?;
                self.check_write(&d, id)?;
                let data = self.gather(&s);
                self.scatter(&d, &data);
                Ok(())
            }
            OpKind::Alloc { buf } => {
                if self.allocated.contains(buf) {
                    return Err(fault(Some(id), FaultKind::DoubleAlloc, format!("{buf} already allocated")));
                }
                self.allocated.insert(*buf);
                if let Some(d) = self.prog.decl(*buf) {
                    self.store.insert(*buf, vec![f32::NAN; d.num_elements()]);
                }
                Ok(())
            }
            OpKind::Dealloc { buf } => {
                if !self.allocated.remove(buf) {
                    return Err(fault(Some(id), FaultKind::Unallocated, format!("dealloc of unallocated {buf}")));
                }
                if self.prog.is_tag(*buf) {
                    if self.dma.contains_key(buf) {
                        return Err(fault(
                            Some(id),
                            FaultKind::TagLeak,
                            format!("tag `{}` released while in flight", self.tag_name(*buf)),
                        ));
                    }
                } else {
                    if let Some((tag, _)) = self.dma.iter().find(|(_, f)| f.dst.root == *buf) {
                        return Err(fault(
                            Some(id),
                            FaultKind::WriteDuringDma,
                            format!("`{}` released while tag `{}` is in flight", self.root_name(*buf), self.tag_name(*tag)),
                        ));
                    }
                    self.store.remove(*buf);
                }
                Ok(())
            }
            OpKind::DmaStart { src, dst, tag } => {
                if self.dma.contains_key(tag) {
                    return Err(fault(
                        Some(id),
                        FaultKind::TagInFlight,
                        format!("tag `{}` started twice without a wait", self.tag_name(*tag)),
                    ));
                }
                let (s, d) = (self.resolve(*src, id)?, self.resolve(*dst, id)?);
                if s.shape != d.shape {
                    return Err(fault(Some(id), FaultKind::OutOfBounds, format!("dma {:?} into {:?}", s.shape, d.shape)));
                }
                self.check_read(&s, id)?;
                self.check_write(&d, id)?;
                let data = self.gather(&s);
                if self.opts.trace {
                    let elem = self.prog.decl(s.root).map_or(4, |d| d.elem.bytes());
                    self.trace.push(TraceEvent::DmaStart { op: id, tag: self.tag_name(*tag), bytes: data.len() * elem });
                }
                self.dma.insert(*tag, InFlight { dst: d, data });
                Ok(())
            }
            OpKind::DmaWait { tag } => {
                let f = self.dma.remove(tag).ok_or_else(|| {
                    fault(Some(id), FaultKind::TagIdle, format!("wait on tag `{}` with no dma in flight", self.tag_name(*tag)))
                })?;
                if self.store.get(f.dst.root).is_none() {
                    return Err(fault(Some(id), FaultKind::Unallocated, "dma destination released"));
                }
                self.scatter(&f.dst, &f.data);
                if self.opts.trace {
                    self.trace.push(TraceEvent::DmaWait { op: id, tag: self.tag_name(*tag) });
                }
                Ok(())
            }
            OpKind::AsyncGroup { group, size } => {
                let size = self.eval(size, id)?;
                self.groups.insert(*group, Group { size, members: Vec::new(), awaited: false });
                Ok(())
            }
            OpKind::AsyncExecute { token, body } => {
                if let Some(old) = self.tokens.get(token) {
                    if !old.awaited && old.group.is_none() {
                        return Err(fault(Some(id), FaultKind::Token, format!("token {token} reissued before joining a group")));
                    }
                }
                let instance = self.next_instance;
                self.next_instance += 1;
                let state = if self.opts.threaded {
                    self.deferred.insert(
                        instance,
                        Deferred { body, vars: self.vars.clone(), views: self.views.clone() },
                    );
                    TokenState::Deferred
                } else {
                    self.exec_block(body)?;
                    TokenState::Done
                };
                self.tokens.insert(*token, Token { instance, state, group: None, awaited: false, op: id });
                Ok(())
            }
            OpKind::AddToGroup { group, token } => {
                let t = self
                    .tokens
                    .get_mut(token)
                    .ok_or_else(|| fault(Some(id), FaultKind::Token, format!("unknown token {token}")))?;
                if t.group.is_some() {
                    return Err(fault(Some(id), FaultKind::Token, format!("token {token} added twice")));
                }
                t.group = Some(*group);
                let instance = t.instance;
                let g = self
                    .groups
                    .get_mut(group)
                    .ok_or_else(|| fault(Some(id), FaultKind::Group, format!("unknown group {group}")))?;
                if g.awaited || g.members.len() as i64 >= g.size {
                    return Err(fault(Some(id), FaultKind::Group, format!("group {group} is full or already awaited")));
                }
                g.members.push(instance);
                Ok(())
            }
            OpKind::AwaitAll { group } => {
                let g = self
                    .groups
                    .get_mut(group)
                    .ok_or_else(|| fault(Some(id), FaultKind::Group, format!("unknown group {group}")))?;
                if g.awaited {
                    return Err(fault(Some(id), FaultKind::Group, format!("group {group} awaited twice")));
                }
                if g.members.len() as i64 != g.size {
                    return Err(fault(
                        Some(id),
                        FaultKind::Group,
                        format!("group {group} holds {} of {} tokens", g.members.len(), g.size),
                    ));
                }
                g.awaited = true;
                let members = g.members.clone();
                let jobs: Vec<Deferred> = members.iter().filter_map(|t| self.deferred.remove(t)).collect();
                if !jobs.is_empty() {
                    self.run_concurrently(id, jobs)?;
                }
                for tok in self.tokens.values_mut().filter(|t| members.contains(&t.instance)) {
                    tok.state = TokenState::Done;
                    tok.awaited = true;
                }
                Ok(())
            }
            OpKind::StoreToggle { cell, value } => {
                let v = self.eval(value, id)?;
                self.toggles.insert(*cell, v);
                Ok(())
            }
            OpKind::LoadToggle { cell, result } => {
                let v = *self
                    .toggles
                    .get(cell)
                    .ok_or_else(|| fault(Some(id), FaultKind::Toggle, format!("load of unset toggle {cell}")))?;
                if self.opts.trace {
                    self.trace.push(TraceEvent::ToggleLoad { op: id, value: v });
                }
                self.vars.insert(*result, v);
                Ok(())
            }
        }
    }

    fn exec_generic(&mut self, id: OpId, g: &GenericOp) -> Result<(), ExecError> {
        let ext = g
            .domain
            .iter()
            .map(|e| {
                let v = self.eval(e, id)?;
                usize::try_from(v).map_err(|_| fault(Some(id), FaultKind::Index, format!("negative extent {v}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let points: usize = ext.iter().product();
        let nin = g.inputs.len();
        let mut views = Vec::with_capacity(g.maps.len());
        for (k, (v, map)) in g.operands().enumerate() {
            let view = self.resolve(v, id)?;
            if map.results.len() != view.shape.len() {
                return Err(fault(Some(id), FaultKind::OutOfBounds, format!("map rank differs from operand {v}")));
            }
            for (j, r) in map.results.iter().enumerate() {
                let need = r.map_or(1, |d| ext[d]);
                if need > view.shape[j] && points > 0 {
                    return Err(fault(
                        Some(id),
                        FaultKind::OutOfBounds,
                        format!("domain extent {need} exceeds axis {j} ({}) of operand {v}", view.shape[j]),
                    ));
                }
            }
            if k < nin {
                self.check_read(&view, id)?;
            } else {
                self.check_write(&view, id)?;
            }
            views.push(view);
        }
        if self.opts.trace {
            self.trace.push(TraceEvent::Generic { op: id, points });
        }
        let rank = ext.len();
        // Per-operand flat offset of the view origin and per-dim coefficient.
        let layout = |view: &View, map: &crate::ir::AffineIndexMap, rs: &[usize]| {
            let base: usize = view.offsets.iter().zip(rs).map(|(o, s)| o * s).sum();
            let mut coef = vec![0usize; rank];
            for (j, r) in map.results.iter().enumerate() {
                if let Some(d) = r {
                    coef[*d] += rs[j];
                }
            }
            (base, coef)
        };
        let mut in_flat = Vec::with_capacity(nin);
        let mut in_coef = Vec::with_capacity(nin);
        for k in 0..nin {
            let (b, c) = layout(&views[k], &g.maps[k], &strides(self.root_shape(views[k].root)));
            in_flat.push(b);
            in_coef.push(c);
        }
        // Outputs accumulate into a dense box over the mapped extents.
        let mut boxes = Vec::new();
        let mut out_flat = Vec::new();
        let mut out_coef = Vec::new();
        for (o, _) in g.outputs.iter().enumerate() {
            let map = g.output_map(o);
            let bshape: Vec<usize> = map.results.iter().map(|r| r.map_or(1, |d| ext[d])).collect();
            let origin = View { root: Val(0), offsets: vec![0; bshape.len()], shape: bshape.clone() };
            let (_, c) = layout(&origin, map, &strides(&bshape));
            out_coef.push(c);
            out_flat.push(0usize);
            let n: usize = bshape.iter().product();
            boxes.push((bshape, vec![g.reductions[o].map_or(f32::NAN, |r| r.init()); n]));
        }
        if points > 0 {
            let inputs: Vec<&[f32]> = views[..nin].iter().map(|v| self.store.get(v.root).unwrap()).collect();
            let mut args = vec![0f32; nin];
            let mut idx = vec![0usize; rank];
            for _ in 0..points {
                for k in 0..nin {
                    args[k] = inputs[k][in_flat[k]];
                }
                for (o, payload) in g.payloads.iter().enumerate() {
                    let v = payload.eval(&args);
                    let slot = &mut boxes[o].1[out_flat[o]];
                    *slot = match g.reductions[o] {
                        Some(r) => r.combine(*slot, v),
                        None => v,
                    };
                }
                let mut d = rank;
                while d > 0 {
                    d -= 1;
                    idx[d] += 1;
                    for k in 0..nin {
                        in_flat[k] += in_coef[k][d];
                    }
                    for o in 0..out_flat.len() {
                        out_flat[o] += out_coef[o][d];
                    }
                    if idx[d] < ext[d] {
                        break;
                    }
                    for k in 0..nin {
                        in_flat[k] -= in_coef[k][d] * ext[d];
                    }
                    for o in 0..out_flat.len() {
                        out_flat[o] -= out_coef[o][d] * ext[d];
                    }
                    idx[d] = 0;
                }
            }
        }
        for (o, (bshape, data)) in boxes.into_iter().enumerate() {
            if points == 0 && g.reductions[o].is_none() {
                continue;
            }
            let v = &views[nin + o];
            let target = View { root: v.root, offsets: v.offsets.clone(), shape: bshape };
            self.scatter(&target, &data);
        }
        Ok(())
    }

    /// Runs each job on its own thread over a copy-on-write view of the
    /// current buffers, then merges the writes, faulting on overlap.
    fn run_concurrently(&mut self, id: OpId, jobs: Vec<Deferred<'p>>) -> Result<(), ExecError> {
        let Store::Owned(base) = &self.store else {
            // nested concurrency inside a worker runs in order
            for job in jobs {
                let (vars, views) = (std::mem::replace(&mut self.vars, job.vars), std::mem::replace(&mut self.views, job.views));
                let r = self.exec_block(job.body);
                self.vars = vars;
                self.views = views;
                r?;
            }
            return Ok(());
        };
        let prog = self.prog;
        let opts = self.opts;
        let toggles = &self.toggles;
        let allocated = &self.allocated;
        let results: Vec<Result<(HashMap<Val, (Vec<f32>, Vec<bool>)>, Vec<TraceEvent>), ExecError>> =
            std::thread::scope(|s| {
                let handles: Vec<_> = jobs
                    .into_iter()
                    .map(|job| {
                        s.spawn(move || {
                            let store = Store::Overlay { base, local: HashMap::new(), freed: HashSet::new() };
                            let mut w = Machine::new(prog, store, opts);
                            w.vars = job.vars;
                            w.views = job.views;
                            w.toggles = toggles.clone();
                            w.allocated = allocated.clone();
                            w.exec_block(job.body)?;
                            w.finish_worker()?;
                            let Store::Overlay { local, .. } = w.store else { unreachable!() };
                            Ok((local, w.trace))
                        })
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
            });
        let mut claimed: HashMap<Val, Vec<bool>> = HashMap::new();
        let mut merged: Vec<(Val, usize, f32)> = Vec::new();
        for r in results {
            let (local, trace) = r?;
            self.trace.extend(trace);
            for (root, (data, dirty)) in local {
                let Some(orig) = base.get(&root) else { continue };
                let claim = claimed.entry(root).or_insert_with(|| vec![false; orig.len()]);
                for (i, &d) in dirty.iter().enumerate() {
                    if d {
                        if claim[i] {
                            return Err(fault(
                                Some(id),
                                FaultKind::Race,
                                format!("concurrent bodies both write `{}`[{i}]", self.root_name(root)),
                            ));
                        }
                        claim[i] = true;
                        merged.push((root, i, data[i]));
                    }
                }
            }
        }
        let Store::Owned(base) = &mut self.store else { unreachable!() };
        for (root, i, v) in merged {
            base.get_mut(&root).unwrap()[i] = v;
        }
        Ok(())
    }

    fn finish_worker(&self) -> Result<(), ExecError> {
        if let Some(tag) = self.dma.keys().next() {
            return Err(fault(None, FaultKind::TagLeak, format!("tag `{}` still in flight", self.tag_name(*tag))));
        }
        Ok(())
    }

    fn finish(&self) -> Result<(), ExecError> {
        self.finish_worker()?;
        if let Some((v, t)) = self.tokens.iter().find(|(_, t)| !t.awaited) {
            return Err(fault(Some(t.op), FaultKind::Token, format!("token {v} never awaited")));
        }
        if let Some((v, _)) = self.groups.iter().find(|(_, g)| !g.awaited) {
            return Err(fault(None, FaultKind::Group, format!("group {v} never awaited")));
        }
        if let Some(v) = self.allocated.iter().find(|v| !self.prog.is_tag(**v)) {
            return Err(fault(None, FaultKind::Leak, format!("`{}` never deallocated", self.root_name(*v))));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::{compile_source, RowShape};

    fn run(src: &str, shape: RowShape, inputs: &[(&str, Vec<f32>)]) -> NamedTensors {
        let p = compile_source(src, shape).unwrap();
        let named = inputs
            .iter()
            .map(|(n, d)| {
                let decl = p.decl_by_name(n).unwrap();
                (n.to_string(), TensorValue::new(decl.shape.clone(), d.clone()))
            })
            .collect();
        interpret(&p, &named).unwrap()
    }

    #[test]
    fn elementwise_add() {
        let out = run(
            "kernel k(a: row<f32>, b: row<f32>) -> (y: row<f32>) { y = a + b; }",
            RowShape::two_d(2, 2),
            &[("a", vec![1.0, 2.0, 3.0, 4.0]), ("b", vec![10.0, 20.0, 30.0, 40.0])],
        );
        assert_eq!(out["y"].data, [11.0, 22.0, 33.0, 44.0]);
    }

    #[test]
    fn row_reduction_broadcasts_back() {
        let out = run(
            "kernel k(x: row<f32>) -> (y: row<f32>) { y = x - max(x, axis=0); }",
            RowShape::two_d(2, 3),
            &[("x", vec![1.0, 5.0, 2.0, -1.0, -3.0, -2.0])],
        );
        assert_eq!(out["y"].data, [-4.0, 0.0, -3.0, 0.0, -2.0, -1.0]);
    }

    #[test]
    fn missing_input_faults() {
        let p = compile_source("kernel k(x: row<f32>) -> (y: row<f32>) { y = x; }", RowShape::one_d(4)).unwrap();
        let err = interpret(&p, &NamedTensors::new()).unwrap_err();
        assert_eq!(err.kind, FaultKind::InputMismatch);
    }

    #[test]
    fn view_overlap() {
        let v = |o: usize, s: usize| View { root: Val(0), offsets: vec![o], shape: vec![s] };
        assert!(v(0, 4).overlaps(&v(3, 2)));
        assert!(!v(0, 4).overlaps(&v(4, 2)));
        assert!(!v(0, 0).overlaps(&v(0, 2)));
    }
}
