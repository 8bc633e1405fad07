//! Concrete walk of a program's control flow that records op instances and
//! the tensor regions they write, without touching any data.

use std::collections::{BTreeMap, HashMap};

use crate::ir::{IndexExpr, KernelProgram, Op, OpId, OpKind, Pred, Role, Val, Var};

use super::OracleError;

/// A box written by one op instance, in coordinates of the root tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionWrite {
    pub tensor: Val,
    pub offsets: Vec<i64>,
    pub sizes: Vec<i64>,
    pub op: OpId,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScheduleScan {
    /// Dynamic instance count per op kind, so loop bodies count once per trip.
    pub counts: BTreeMap<&'static str, u64>,
    pub writes: Vec<RegionWrite>,
}

impl ScheduleScan {
    pub fn count(&self, kind: &str) -> u64 {
        self.counts.get(kind).copied().unwrap_or(0)
    }
}

#[derive(Clone)]
struct View {
    root: Val,
    offsets: Vec<i64>,
    shape: Vec<i64>,
}

struct Walker<'a> {
    prog: &'a KernelProgram,
    vars: HashMap<Var, i64>,
    views: HashMap<Val, View>,
    toggles: HashMap<Val, i64>,
    /// Open async groups: declared size and tokens added so far.
    groups: HashMap<Val, (usize, usize)>,
    executed: HashMap<Val, u64>,
    scan: ScheduleScan,
}

fn sched_err(op: &Op, msg: impl std::fmt::Display) -> OracleError {
    OracleError::Schedule(format!("{}: {msg}", op.id))
}

impl Walker<'_> {
    fn view(&self, v: Val) -> Option<View> {
        if let Some(w) = self.views.get(&v) {
            return Some(w.clone());
        }
        let d = self.prog.decl(v)?;
        Some(View { root: v, offsets: vec![0; d.shape.len()], shape: d.shape.iter().map(|&s| s as i64).collect() })
    }

    fn eval(&self, e: &IndexExpr, op: &Op) -> Result<i64, OracleError> {
        e.eval(&|v| self.vars.get(&v).copied(), &|v, a| self.view(v).and_then(|w| w.shape.get(a).copied()))
            .map_err(|x| sched_err(op, x))
    }

    fn pred(&self, p: &Pred, op: &Op) -> Result<bool, OracleError> {
        p.eval(&|v| self.vars.get(&v).copied(), &|v, a| self.view(v).and_then(|w| w.shape.get(a).copied()))
            .map_err(|x| sched_err(op, x))
    }

    fn write(&mut self, v: Val, op: &Op) -> Result<(), OracleError> {
        let w = self.view(v).ok_or_else(|| sched_err(op, format!("write to unknown value {v}")))?;
        self.scan.writes.push(RegionWrite { tensor: w.root, offsets: w.offsets, sizes: w.shape, op: op.id });
        Ok(())
    }

    fn block(&mut self, ops: &[Op]) -> Result<(), OracleError> {
        ops.iter().try_for_each(|o| self.op(o))
    }

    fn op(&mut self, op: &Op) -> Result<(), OracleError> {
        *self.scan.counts.entry(op.kind.name()).or_default() += 1;
        match &op.kind {
            OpKind::Generic(g) => {
                for o in &g.outputs {
                    self.write(*o, op)?;
                }
            }
            OpKind::For { var, lb, ub, step, body } => {
                let (lo, hi) = (self.eval(lb, op)?, self.eval(ub, op)?);
                let mut i = lo;
                while i < hi {
                    self.vars.insert(*var, i);
                    self.block(body)?;
                    i += step;
                }
            }
            OpKind::Forall { var, num_threads, body } => {
                for t in 0..*num_threads {
                    self.vars.insert(*var, t as i64);
                    self.block(body)?;
                }
            }
            OpKind::If { pred, then_body } => {
                if self.pred(pred, op)? {
                    self.block(then_body)?;
                }
            }
            OpKind::ExtractSlice { result, source, offsets, sizes } => {
                let src = self.view(*source).ok_or_else(|| sched_err(op, "slice of unknown value"))?;
                let off = offsets.iter().map(|e| self.eval(e, op)).collect::<Result<Vec<_>, _>>()?;
                let shape = sizes.iter().map(|e| self.eval(e, op)).collect::<Result<Vec<_>, _>>()?;
                let offsets = src.offsets.iter().zip(&off).map(|(a, b)| a + b).collect();
                self.views.insert(*result, View { root: src.root, offsets, shape });
            }
            OpKind::Copy { dst, .. } | OpKind::DmaStart { dst, .. } => self.write(*dst, op)?,
            OpKind::Alloc { .. } | OpKind::Dealloc { .. } | OpKind::DmaWait { .. } => {}
            OpKind::AsyncGroup { group, size } => {
                let n = self.eval(size, op)?;
                self.groups.insert(*group, (n as usize, 0));
            }
            OpKind::AsyncExecute { token, body } => {
                self.block(body)?;
                *self.executed.entry(*token).or_default() += 1;
            }
            OpKind::AddToGroup { group, token } => {
                let pending = self.executed.get_mut(token).filter(|n| **n > 0).ok_or_else(|| sched_err(op, "token added before execute"))?;
                *pending -= 1;
                let g = self.groups.get_mut(group).ok_or_else(|| sched_err(op, "add to unknown group"))?;
                g.1 += 1;
            }
            OpKind::AwaitAll { group } => {
                let (size, added) = self.groups.remove(group).ok_or_else(|| sched_err(op, "await of unknown group"))?;
                if size != added {
                    return Err(sched_err(op, format!("group of {size} awaited with {added} members")));
                }
            }
            OpKind::StoreToggle { cell, value } => {
                let v = self.eval(value, op)?;
                self.toggles.insert(*cell, v);
            }
            OpKind::LoadToggle { cell, result } => {
                let v = *self.toggles.get(cell).ok_or_else(|| sched_err(op, "load of unset toggle"))?;
                self.vars.insert(*result, v);
            }
        }
        Ok(())
    }
}

/// Walks `program` once, sequentially. Also checks fork-join balance: every
/// executed token is added to a group and every group is awaited with as
/// many members as it declared.
pub fn scan_schedule(program: &KernelProgram) -> Result<ScheduleScan, OracleError> {
    let mut w = Walker {
        prog: program,
        vars: HashMap::new(),
        views: HashMap::new(),
        toggles: HashMap::new(),
        groups: HashMap::new(),
        executed: HashMap::new(),
        scan: ScheduleScan::default(),
    };
    w.block(&program.body)?;
    if let Some(g) = w.groups.keys().next() {
        return Err(OracleError::Schedule(format!("group {g} never awaited")));
    }
    if w.executed.values().any(|n| *n > 0) {
        return Err(OracleError::Schedule("executed token never added to a group".into()));
    }
    Ok(w.scan)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Coverage {
    pub tensor: String,
    pub elements: usize,
    /// Elements no op instance writes.
    pub uncovered: usize,
    /// Elements written by more than one op instance.
    pub overwritten: usize,
}

impl Coverage {
    pub fn exact(&self) -> bool {
        self.uncovered == 0 && self.overwritten == 0
    }
}

/// How often each element of every kernel output is written. An exact
/// partition has every element written once.
pub fn output_coverage(program: &KernelProgram) -> Result<Vec<Coverage>, OracleError> {
    let scan = scan_schedule(program)?;
    let mut out = Vec::new();
    for d in program.decls.iter().filter(|d| d.role == Role::Output) {
        let shape: Vec<i64> = d.shape.iter().map(|&s| s as i64).collect();
        let mut hits = vec![0u32; d.num_elements()];
        for w in scan.writes.iter().filter(|w| w.tensor == d.id) {
            mark(&mut hits, &shape, &w.offsets, &w.sizes)?;
        }
        out.push(Coverage {
            tensor: d.name.clone(),
            elements: hits.len(),
            uncovered: hits.iter().filter(|h| **h == 0).count(),
            overwritten: hits.iter().filter(|h| **h > 1).count(),
        });
    }
    Ok(out)
}

fn mark(hits: &mut [u32], shape: &[i64], offsets: &[i64], sizes: &[i64]) -> Result<(), OracleError> {
    for a in 0..shape.len() {
        if offsets[a] < 0 || sizes[a] < 0 || offsets[a] + sizes[a] > shape[a] {
            return Err(OracleError::Schedule(format!("region {offsets:?}+{sizes:?} outside {shape:?}")));
        }
    }
    if sizes.contains(&0) {
        return Ok(());
    }
    let mut idx = vec![0i64; shape.len()];
    loop {
        let mut flat = 0i64;
        for a in 0..shape.len() {
            flat = flat * shape[a] + offsets[a] + idx[a];
        }
        hits[flat as usize] += 1;
        let mut a = shape.len();
        loop {
            if a == 0 {
                return Ok(());
            }
            a -= 1;
            idx[a] += 1;
            if idx[a] < sizes[a] {
                break;
            }
            idx[a] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::{compile_source, RowShape};
    use crate::passes::{tile_generic, TileSpec};

    #[test]
    fn ragged_tiles_cover_exactly() {
        let p = compile_source("kernel k(x: row<f32>) -> (y: row<f32>) { y = x + 1.0; }", RowShape::two_d(10, 7)).unwrap();
        let t = tile_generic(&p, &TileSpec::with_sizes(vec![3, 4], 1 << 20)).unwrap();
        let cov = output_coverage(&t).unwrap();
        assert_eq!(cov.len(), 1);
        assert!(cov[0].exact(), "{cov:?}");
        assert_eq!(scan_schedule(&t).unwrap().count("generic"), 4 * 2);
    }

    #[test]
    fn mark_detects_overlap() {
        let mut hits = vec![0; 6];
        mark(&mut hits, &[2, 3], &[0, 1], &[2, 2]).unwrap();
        mark(&mut hits, &[2, 3], &[1, 0], &[1, 2]).unwrap();
        assert_eq!(hits, vec![0, 1, 1, 1, 2, 1]);
        assert!(mark(&mut hits, &[2, 3], &[1, 2], &[1, 2]).is_err());
    }
}
