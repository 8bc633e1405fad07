//! Structural verifier. Violations are reported as data; an empty report means
//! the program is well formed.

use std::collections::{HashMap, HashSet};
use std::fmt;

use super::{IteratorKind, KernelProgram, MemSpace, Op, OpId, OpKind, Role, Val, Var};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub op: Option<OpId>,
    pub rule: &'static str,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.op {
            Some(op) => write!(f, "{op}: {}: {}", self.rule, self.detail),
            None => write!(f, "{}: {}", self.rule, self.detail),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct VerifyReport {
    pub violations: Vec<Violation>,
}

impl VerifyReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn has_rule(&self, rule: &str) -> bool {
        self.violations.iter().any(|v| v.rule == rule)
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_ok() {
            return f.write_str("ok");
        }
        for v in &self.violations {
            writeln!(f, "{v}")?;
        }
        Ok(())
    }
}

/// Checks every structural invariant of the IR. When `tcm_bytes` is given, the
/// peak of simultaneously live TCM buffers must also fit.
pub fn verify(program: &KernelProgram, tcm_bytes: Option<usize>) -> VerifyReport {
    let mut v = Verifier { program, report: VerifyReport::default(), ranks: HashMap::new() };
    v.check_decls();
    let mut scope = Scope::default();
    for d in &program.decls {
        scope.vals.insert(d.id);
        v.ranks.insert(d.id, d.shape.len());
    }
    for t in &program.tags {
        scope.vals.insert(t.id);
    }
    for t in &program.toggles {
        scope.vals.insert(t.id);
    }
    v.check_block(&program.body, &mut scope);
    v.check_async_discipline();
    if let Some(budget) = tcm_bytes {
        let peak = tcm_peak_bytes(program);
        if peak > budget {
            v.push(None, "tcm budget", format!("peak live TCM bytes {peak} exceed capacity {budget}"));
        }
    }
    v.report
}

/// Peak bytes of simultaneously live TCM buffers, from alloc/dealloc nesting.
/// TCM-resident program tensors count as always live.
pub fn tcm_peak_bytes(program: &KernelProgram) -> usize {
    let resident: usize = program
        .decls
        .iter()
        .filter(|d| d.space == MemSpace::Tcm && d.role != Role::Scratch)
        .map(|d| d.bytes())
        .sum();
    fn block_peak(program: &KernelProgram, ops: &[Op], base: usize) -> usize {
        let mut live = base;
        let mut peak = base;
        for op in ops {
            match &op.kind {
                OpKind::Alloc { buf } => {
                    live += program.decl(*buf).map_or(0, |d| d.bytes());
                }
                OpKind::Dealloc { buf } => {
                    live = live.saturating_sub(program.decl(*buf).map_or(0, |d| d.bytes()));
                }
                _ => {
                    if let Some(body) = op.kind.body() {
                        peak = peak.max(block_peak(program, body, live));
                    }
                }
            }
            peak = peak.max(live);
        }
        peak
    }
    block_peak(program, &program.body, resident)
}

#[derive(Clone, Default)]
struct Scope {
    vals: HashSet<Val>,
    vars: HashSet<Var>,
}

struct Verifier<'a> {
    program: &'a KernelProgram,
    report: VerifyReport,
    ranks: HashMap<Val, usize>,
}

impl Verifier<'_> {
    fn push(&mut self, op: Option<OpId>, rule: &'static str, detail: String) {
        self.report.violations.push(Violation { op, rule, detail });
    }

    fn check_decls(&mut self) {
        let mut seen = HashSet::new();
        for d in &self.program.decls {
            if !seen.insert(d.id) {
                self.push(None, "duplicate value", format!("{} declared twice", d.id));
            }
            if d.shape.is_empty() || d.shape.contains(&0) {
                self.push(None, "decl shape", format!("{} ({}) has shape {:?}", d.id, d.name, d.shape));
            }
        }
    }

    fn use_val(&mut self, op: &Op, v: Val, scope: &Scope) {
        if !scope.vals.contains(&v) {
            self.push(Some(op.id), "undefined value", format!("{v} used before definition"));
        }
    }

    fn check_exprs<'e>(&mut self, op: &Op, exprs: impl IntoIterator<Item = &'e super::IndexExpr>, scope: &Scope) {
        for e in exprs {
            let (mut vals, mut vars) = (Vec::new(), Vec::new());
            e.vals(&mut vals);
            e.vars(&mut vars);
            for v in vals {
                self.use_val(op, v, scope);
            }
            for v in vars {
                if !scope.vars.contains(&v) {
                    self.push(Some(op.id), "undefined value", format!("{v} used outside its loop"));
                }
            }
        }
    }

    fn is_data(&self, v: Val) -> bool {
        self.ranks.contains_key(&v)
    }

    fn check_block(&mut self, ops: &[Op], scope: &mut Scope) {
        self.check_alloc_balance(ops);
        for op in ops {
            self.check_op(op, scope);
        }
    }

    fn check_alloc_balance(&mut self, ops: &[Op]) {
        for (i, op) in ops.iter().enumerate() {
            match &op.kind {
                OpKind::Alloc { buf } => {
                    let later = ops[i + 1..]
                        .iter()
                        .filter(|o| matches!(&o.kind, OpKind::Dealloc { buf: b } if b == buf))
                        .count();
                    if later != 1 {
                        self.push(
                            Some(op.id),
                            "alloc/dealloc balance",
                            format!("alloc {buf} has {later} matching deallocs in its block"),
                        );
                    }
                    let ok = self.program.is_tag(*buf)
                        || self.program.decl(*buf).is_some_and(|d| d.role == Role::Scratch);
                    if !ok {
                        self.push(Some(op.id), "alloc kind", format!("{buf} is not a scratch buffer or tag"));
                    }
                }
                OpKind::Dealloc { buf } => {
                    let earlier = ops[..i]
                        .iter()
                        .filter(|o| matches!(&o.kind, OpKind::Alloc { buf: b } if b == buf))
                        .count();
                    if earlier != 1 {
                        self.push(
                            Some(op.id),
                            "alloc/dealloc balance",
                            format!("dealloc {buf} has {earlier} matching allocs in its block"),
                        );
                    }
                }
                _ => {}
            }
        }
    }

    fn check_op(&mut self, op: &Op, scope: &mut Scope) {
        match &op.kind {
            OpKind::Generic(g) => {
                let operands = g.inputs.len() + g.outputs.len();
                if g.maps.len() != operands {
                    self.push(
                        Some(op.id),
                        "operand/map arity",
                        format!("{operands} operands but {} maps", g.maps.len()),
                    );
                }
                if g.iterators.len() != g.domain.len() || g.domain.is_empty() {
                    self.push(
                        Some(op.id),
                        "iterator arity",
                        format!("{} domain dims but {} iterator kinds", g.domain.len(), g.iterators.len()),
                    );
                }
                if g.payloads.len() != g.outputs.len() || g.reductions.len() != g.outputs.len() {
                    self.push(Some(op.id), "payload arity", "one payload and combinator slot per output".into());
                }
                for (i, p) in g.payloads.iter().enumerate() {
                    if p.arg_bound() > g.inputs.len() {
                        self.push(
                            Some(op.id),
                            "payload arity",
                            format!("payload {i} reads block argument {} of {}", p.arg_bound() - 1, g.inputs.len()),
                        );
                    }
                }
                for e in &g.domain {
                    if let Some(c) = e.constant() {
                        if c < 1 {
                            self.push(Some(op.id), "domain extent", format!("extent {c} < 1"));
                        }
                    }
                }
                self.check_exprs(op, &g.domain, scope);
                let rank = g.domain.len();
                for (k, (v, map)) in g.operands().enumerate() {
                    self.use_val(op, v, scope);
                    let mut seen = HashSet::new();
                    for d in map.results.iter().flatten() {
                        if *d >= rank {
                            self.push(Some(op.id), "map dimension", format!("operand {k} names d{d} of a rank-{rank} domain"));
                        } else if !seen.insert(*d) {
                            self.push(Some(op.id), "map dimension", format!("operand {k} repeats d{d}"));
                        }
                    }
                    if let Some(r) = self.ranks.get(&v) {
                        if *r != map.results.len() {
                            self.push(
                                Some(op.id),
                                "map rank",
                                format!("operand {k} has rank {r} but its map has {} results", map.results.len()),
                            );
                        }
                    }
                    if let Some(decl) = self.program.decl(v) {
                        for (j, r) in map.results.iter().enumerate() {
                            let want = match r {
                                Some(d) => g.domain.get(*d).and_then(|e| e.constant()),
                                None => Some(1),
                            };
                            if let (Some(w), Some(have)) = (want, decl.shape.get(j)) {
                                if w != *have as i64 {
                                    self.push(
                                        Some(op.id),
                                        "operand shape",
                                        format!("operand {k} axis {j} has extent {have}, map requires {w}"),
                                    );
                                }
                            }
                        }
                    }
                }
                let has_reduction = g.iterators.contains(&IteratorKind::Reduction);
                for (i, out) in g.outputs.iter().enumerate() {
                    let map = g.maps.get(g.inputs.len() + i);
                    for (d, kind) in g.iterators.iter().enumerate() {
                        if *kind == IteratorKind::Reduction && map.is_some_and(|m| m.uses_dim(d)) {
                            self.push(
                                Some(op.id),
                                "reduction escapes",
                                format!("reduction dim d{d} appears in the map of output {out}"),
                            );
                        }
                    }
                    if has_reduction && g.reductions.get(i).copied().flatten().is_none() {
                        self.push(Some(op.id), "missing combinator", format!("output {out} needs a reduction combinator"));
                    }
                    if self.program.decl(*out).is_some_and(|d| d.role == Role::Input) {
                        self.push(Some(op.id), "writes input", format!("{out} is a kernel input"));
                    }
                }
            }
            OpKind::For { var, lb, ub, step, body } => {
                self.check_exprs(op, [lb, ub], scope);
                if *step < 1 {
                    self.push(Some(op.id), "loop step", format!("step {step} < 1"));
                }
                let mut inner = scope.clone();
                inner.vars.insert(*var);
                self.check_block(body, &mut inner);
            }
            OpKind::Forall { var, num_threads, body } => {
                if *num_threads < 1 {
                    self.push(Some(op.id), "thread count", "forall needs at least one thread".into());
                }
                let mut inner = scope.clone();
                inner.vars.insert(*var);
                self.check_block(body, &mut inner);
            }
            OpKind::If { pred, then_body } => {
                self.check_exprs(op, pred.exprs(), scope);
                let mut inner = scope.clone();
                self.check_block(then_body, &mut inner);
            }
            OpKind::AsyncExecute { token, body } => {
                let mut inner = scope.clone();
                self.check_block(body, &mut inner);
                scope.vals.insert(*token);
            }
            OpKind::ExtractSlice { result, source, offsets, sizes } => {
                self.use_val(op, *source, scope);
                self.check_exprs(op, offsets.iter().chain(sizes), scope);
                if let Some(r) = self.ranks.get(source).copied() {
                    if offsets.len() != r || sizes.len() != r {
                        self.push(Some(op.id), "slice rank", format!("slice of rank-{r} {source} has {} offsets", offsets.len()));
                    }
                    self.ranks.insert(*result, r);
                } else {
                    self.push(Some(op.id), "slice rank", format!("{source} is not a tensor view"));
                }
                for s in sizes {
                    if let Some(c) = s.constant() {
                        if c < 1 {
                            self.push(Some(op.id), "slice size", format!("size {c} < 1"));
                        }
                    }
                }
                scope.vals.insert(*result);
            }
            OpKind::Copy { src, dst } | OpKind::DmaStart { src, dst, .. } => {
                self.use_val(op, *src, scope);
                self.use_val(op, *dst, scope);
                for v in [src, dst] {
                    if !self.is_data(*v) {
                        self.push(Some(op.id), "copy operand", format!("{v} is not a tensor view"));
                    }
                }
                if let (Some(a), Some(b)) = (self.ranks.get(src), self.ranks.get(dst)) {
                    if a != b {
                        self.push(Some(op.id), "copy operand", format!("rank {a} copied into rank {b}"));
                    }
                }
                if let OpKind::DmaStart { tag, .. } = &op.kind {
                    self.check_tag(op, *tag, scope);
                }
            }
            OpKind::DmaWait { tag } => self.check_tag(op, *tag, scope),
            OpKind::Alloc { buf } | OpKind::Dealloc { buf } => self.use_val(op, *buf, scope),
            OpKind::AsyncGroup { group, size } => {
                self.check_exprs(op, [size], scope);
                scope.vals.insert(*group);
            }
            OpKind::AddToGroup { group, token } => {
                self.use_val(op, *group, scope);
                self.use_val(op, *token, scope);
            }
            OpKind::AwaitAll { group } => self.use_val(op, *group, scope),
            OpKind::StoreToggle { cell, value } => {
                self.check_toggle(op, *cell);
                self.check_exprs(op, [value], scope);
            }
            OpKind::LoadToggle { cell, result } => {
                self.check_toggle(op, *cell);
                scope.vars.insert(*result);
            }
        }
    }

    fn check_tag(&mut self, op: &Op, tag: Val, scope: &Scope) {
        self.use_val(op, tag, scope);
        if !self.program.is_tag(tag) {
            self.push(Some(op.id), "tag kind", format!("{tag} is not a DMA tag"));
        }
    }

    fn check_toggle(&mut self, op: &Op, cell: Val) {
        if !self.program.is_toggle(cell) {
            self.push(Some(op.id), "toggle kind", format!("{cell} is not a toggle cell"));
        }
    }

    /// Every token is added to exactly one group and every group is awaited
    /// exactly once.
    fn check_async_discipline(&mut self) {
        let mut token_adds: HashMap<Val, usize> = HashMap::new();
        let mut tokens = Vec::new();
        let mut group_waits: HashMap<Val, usize> = HashMap::new();
        let mut groups = Vec::new();
        self.program.walk(&mut |op, _| match &op.kind {
            OpKind::AsyncExecute { token, .. } => tokens.push((op.id, *token)),
            OpKind::AsyncGroup { group, .. } => groups.push((op.id, *group)),
            OpKind::AddToGroup { token, .. } => *token_adds.entry(*token).or_default() += 1,
            OpKind::AwaitAll { group } => *group_waits.entry(*group).or_default() += 1,
            _ => {}
        });
        for (id, t) in tokens {
            let n = token_adds.get(&t).copied().unwrap_or(0);
            if n != 1 {
                self.push(Some(id), "token discipline", format!("token {t} added to {n} groups"));
            }
        }
        for (id, g) in groups {
            let n = group_waits.get(&g).copied().unwrap_or(0);
            if n != 1 {
                self.push(Some(id), "group discipline", format!("group {g} awaited {n} times"));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::*;

    fn elementwise(n: usize) -> (KernelProgram, GenericOp) {
        let mut p = KernelProgram::new("t");
        let a = p.add_tensor("a", vec![n], ElemType::F32, MemSpace::Ddr, Role::Input);
        let b = p.add_tensor("b", vec![n], ElemType::F32, MemSpace::Ddr, Role::Input);
        let y = p.add_tensor("y", vec![n], ElemType::F32, MemSpace::Ddr, Role::Output);
        let g = GenericOp {
            domain: vec![IndexExpr::Const(n as i64)],
            iterators: vec![IteratorKind::Parallel],
            inputs: vec![a, b],
            outputs: vec![y],
            maps: vec![AffineIndexMap::identity(1); 3],
            payloads: vec![PayloadExpr::binary(BinaryOp::Add, PayloadExpr::arg(0), PayloadExpr::arg(1))],
            reductions: vec![None],
        };
        (p, g)
    }

    #[test]
    fn well_formed_generic_verifies() {
        let (mut p, g) = elementwise(8);
        let op = p.op(OpKind::Generic(g));
        p.body.push(op);
        assert!(verify(&p, None).is_ok(), "{}", verify(&p, None));
    }

    #[test]
    fn missing_map_is_an_arity_violation() {
        let (mut p, mut g) = elementwise(8);
        g.maps.truncate(2);
        let op = p.op(OpKind::Generic(g));
        p.body.push(op);
        assert!(verify(&p, None).has_rule("operand/map arity"));
    }

    #[test]
    fn reduction_dim_in_output_map_escapes() {
        let mut p = KernelProgram::new("r");
        let x = p.add_tensor("x", vec![4, 8], ElemType::F32, MemSpace::Ddr, Role::Input);
        let y = p.add_tensor("y", vec![4, 8], ElemType::F32, MemSpace::Ddr, Role::Output);
        let g = GenericOp {
            domain: vec![IndexExpr::Const(4), IndexExpr::Const(8)],
            iterators: vec![IteratorKind::Parallel, IteratorKind::Reduction],
            inputs: vec![x],
            outputs: vec![y],
            maps: vec![AffineIndexMap::identity(2), AffineIndexMap::identity(2)],
            payloads: vec![PayloadExpr::arg(0)],
            reductions: vec![Some(ReductionKind::Sum)],
        };
        let op = p.op(OpKind::Generic(g));
        p.body.push(op);
        assert!(verify(&p, None).has_rule("reduction escapes"));
    }

    #[test]
    fn unbalanced_alloc_is_reported() {
        let mut p = KernelProgram::new("a");
        let t = p.add_tensor("t", vec![4], ElemType::F32, MemSpace::Tcm, Role::Scratch);
        let op = p.op(OpKind::Alloc { buf: t });
        p.body.push(op);
        assert!(verify(&p, None).has_rule("alloc/dealloc balance"));
    }

    #[test]
    fn tcm_budget_counts_live_allocations() {
        let mut p = KernelProgram::new("a");
        let t = p.add_tensor("t", vec![1024], ElemType::F32, MemSpace::Tcm, Role::Scratch);
        let a = p.op(OpKind::Alloc { buf: t });
        let d = p.op(OpKind::Dealloc { buf: t });
        p.body.extend([a, d]);
        assert_eq!(tcm_peak_bytes(&p), 4096);
        assert!(verify(&p, Some(4096)).is_ok());
        assert!(verify(&p, Some(4095)).has_rule("tcm budget"));
    }
}
