use std::collections::HashMap;
use std::fmt;

use crate::ir::{GenericOp, IndexExpr, KernelProgram, Op, OpKind, PayloadExpr, Pred, Val, Var};
use crate::passes::vectorize::{is_vectorized, vector_width};

use super::{MachineConfig, PerfError};

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TimingReport {
    pub total_cycles: f64,
    pub compute_cycles: f64,
    pub transfer_cycles: f64,
    /// `compute + transfer + overhead - total`: work hidden under other work.
    pub overlapped_cycles: f64,
    pub overhead_cycles: f64,
    /// transfer / (transfer + compute); 0 when both are 0.
    pub memory_fraction: f64,
}

impl fmt::Display for TimingReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "total {:.0} cycles (compute {:.0}, transfer {:.0}, overhead {:.0}, overlapped {:.0}, m = {:.3})",
            self.total_cycles,
            self.compute_cycles,
            self.transfer_cycles,
            self.overhead_cycles,
            self.overlapped_cycles,
            self.memory_fraction
        )
    }
}

/// Walks the schedule of `program` and accounts cycles on `config`.
pub fn simulate(program: &KernelProgram, config: &MachineConfig) -> Result<TimingReport, PerfError> {
    config.validate()?;
    let mut shapes = HashMap::new();
    let mut roots = HashMap::new();
    for d in &program.decls {
        shapes.insert(d.id, d.shape.iter().map(|&s| s as i64).collect());
        roots.insert(d.id, d.id);
    }
    let mut sim = Sim::new(program, config, HashMap::new(), shapes, roots);
    sim.block(&program.body)?;
    let end = sim.dma.values().fold(sim.now, |a, &b| a.max(b)).max(sim.dma_free);
    let (c, t, o) = (sim.compute, sim.transfer, sim.overhead);
    Ok(TimingReport {
        total_cycles: end,
        compute_cycles: c,
        transfer_cycles: t,
        overlapped_cycles: (c + t + o - end).max(0.0),
        overhead_cycles: o,
        memory_fraction: if c + t > 0.0 { t / (t + c) } else { 0.0 },
    })
}

struct Sim<'a> {
    prog: &'a KernelProgram,
    cfg: &'a MachineConfig,
    vars: HashMap<Var, i64>,
    shapes: HashMap<Val, Vec<i64>>,
    roots: HashMap<Val, Val>,
    toggles: HashMap<Val, i64>,
    now: f64,
    dma_free: f64,
    dma: HashMap<Val, f64>,
    tokens: HashMap<Val, Job>,
    groups: HashMap<Val, Vec<Job>>,
    compute: f64,
    transfer: f64,
    overhead: f64,
}

#[derive(Clone, Copy)]
struct Job {
    duration: f64,
    compute: f64,
    transfer: f64,
    overhead: f64,
}

fn err(op: &Op, msg: impl fmt::Display) -> PerfError {
    PerfError::Schedule(format!("{}: {msg}", op.id))
}

impl<'a> Sim<'a> {
    fn new(
        prog: &'a KernelProgram,
        cfg: &'a MachineConfig,
        vars: HashMap<Var, i64>,
        shapes: HashMap<Val, Vec<i64>>,
        roots: HashMap<Val, Val>,
    ) -> Self {
        Self {
            prog,
            cfg,
            vars,
            shapes,
            roots,
            toggles: HashMap::new(),
            now: 0.0,
            dma_free: 0.0,
            dma: HashMap::new(),
            tokens: HashMap::new(),
            groups: HashMap::new(),
            compute: 0.0,
            transfer: 0.0,
            overhead: 0.0,
        }
    }

    fn child(&self) -> Sim<'a> {
        Sim::new(self.prog, self.cfg, self.vars.clone(), self.shapes.clone(), self.roots.clone())
    }

    fn eval(&self, e: &IndexExpr, op: &Op) -> Result<i64, PerfError> {
        e.eval(&|v| self.vars.get(&v).copied(), &|v, a| self.shapes.get(&v).and_then(|s| s.get(a).copied()))
            .map_err(|x| err(op, x))
    }

    fn pred(&self, p: &Pred, op: &Op) -> Result<bool, PerfError> {
        p.eval(&|v| self.vars.get(&v).copied(), &|v, a| self.shapes.get(&v).and_then(|s| s.get(a).copied()))
            .map_err(|x| err(op, x))
    }

    fn view_bytes(&self, v: Val) -> f64 {
        let n: i64 = self.shapes.get(&v).map_or(0, |s| s.iter().product());
        let elem = self.roots.get(&v).and_then(|r| self.prog.decl(*r)).map_or(4, |d| d.elem.bytes());
        (n.max(0) as usize * elem) as f64
    }

    fn narrow(&self, v: Val) -> bool {
        self.roots.get(&v).and_then(|r| self.prog.decl(*r)).is_some_and(|d| d.elem.is_narrow())
    }

    fn transfer_cycles(&self, bytes: f64) -> f64 {
        self.cfg.dma_latency_cycles + bytes / self.cfg.dma_bandwidth_bytes_per_cycle
    }

    fn block(&mut self, ops: &[Op]) -> Result<(), PerfError> {
        for op in ops {
            self.op(op)?;
        }
        Ok(())
    }

    /// Scalar cycles per domain point.
    fn point_cycles(&self, g: &GenericOp) -> f64 {
        let mut c = self.cfg.access_cycles * (g.inputs.len() + g.outputs.len()) as f64;
        for (p, r) in g.payloads.iter().zip(&g.reductions) {
            p.visit(&mut |n| {
                c += match n {
                    PayloadExpr::Unary(u, _) => self.cfg.op_cycles.unary(*u),
                    PayloadExpr::Binary(b, _, _) => self.cfg.op_cycles.binary(*b),
                    _ => 0.0,
                }
            });
            if let Some(r) = r {
                c += match r {
                    crate::ir::ReductionKind::Sum => self.cfg.op_cycles.add,
                    crate::ir::ReductionKind::Max => self.cfg.op_cycles.max,
                };
            }
        }
        c
    }

    fn generic_cycles(&self, op: &Op, g: &GenericOp) -> Result<(f64, f64), PerfError> {
        let mut points = 1i64;
        for e in &g.domain {
            points *= self.eval(e, op)?.max(0);
        }
        let mut lanes = 1.0;
        if let Some(w) = vector_width(op).filter(|w| *w > 1) {
            lanes = (w as f64 * self.cfg.vector_width_effect).max(1.0);
            if g.inputs.iter().chain(&g.outputs).any(|v| self.narrow(*v)) {
                lanes *= 2.0;
            }
        }
        let ws: f64 = g.inputs.iter().chain(&g.outputs).map(|v| self.view_bytes(*v)).sum();
        Ok((points as f64 * self.point_cycles(g) / lanes, ws))
    }

    fn spill(&self, cycles: f64, ws: f64) -> f64 {
        if ws > self.cfg.context_ws_bytes as f64 {
            cycles * self.cfg.spill_factor
        } else {
            cycles
        }
    }

    fn add_compute(&mut self, c: f64) {
        self.now += c;
        self.compute += c;
    }

    fn dma(&mut self, bytes: f64) -> f64 {
        let d = self.transfer_cycles(bytes);
        let start = self.now.max(self.dma_free);
        self.dma_free = start + d;
        self.transfer += d;
        self.dma_free
    }

    /// Runs each job on the earliest free context; returns the makespan.
    fn makespan(&self, jobs: &[f64]) -> f64 {
        let mut free = vec![0.0f64; self.cfg.num_hvx_contexts];
        for j in jobs {
            let slot = free.iter_mut().min_by(|a, b| a.total_cmp(b)).unwrap();
            *slot += j;
        }
        free.into_iter().fold(0.0, f64::max)
    }

    /// Joins finished thread bodies: the critical path advances the clock
    /// while their work is accounted in full.
    fn join(&mut self, jobs: &[Job]) {
        let durations: Vec<f64> = jobs.iter().map(|j| j.duration).collect();
        self.now += self.makespan(&durations) + self.cfg.barrier_cycles;
        self.overhead += self.cfg.barrier_cycles;
        for j in jobs {
            self.compute += j.compute;
            self.transfer += j.transfer;
            self.overhead += j.overhead;
        }
    }

    fn run_child(&self, var: Option<(Var, i64)>, body: &[Op]) -> Result<Job, PerfError> {
        let mut c = self.child();
        if let Some((v, x)) = var {
            c.vars.insert(v, x);
        }
        c.block(body)?;
        Ok(Job { duration: c.now.max(c.dma_free), compute: c.compute, transfer: c.transfer, overhead: c.overhead })
    }

    fn spawn(&mut self) {
        self.now += self.cfg.thread_spawn_cycles;
        self.overhead += self.cfg.thread_spawn_cycles;
    }

    fn op(&mut self, op: &Op) -> Result<(), PerfError> {
        match &op.kind {
            OpKind::Generic(g) => {
                let (c, ws) = self.generic_cycles(op, g)?;
                let c = self.spill(c, ws);
                self.add_compute(c);
            }
            OpKind::For { var, lb, ub, step, body } => {
                let (lo, hi) = (self.eval(lb, op)?, self.eval(ub, op)?);
                if is_vectorized(op) && body.iter().all(|o| matches!(o.kind, OpKind::Generic(_) | OpKind::ExtractSlice { .. })) {
                    return self.vector_loop(op, *var, lo, hi, *step, body);
                }
                let mut i = lo;
                while i < hi {
                    self.vars.insert(*var, i);
                    self.block(body)?;
                    i += step;
                }
            }
            OpKind::Forall { var, num_threads, body } => {
                let mut jobs = Vec::with_capacity(*num_threads);
                for t in 0..*num_threads {
                    self.spawn();
                    jobs.push(self.run_child(Some((*var, t as i64)), body)?);
                }
                self.join(&jobs);
            }
            OpKind::If { pred, then_body } => {
                if self.pred(pred, op)? {
                    self.block(then_body)?;
                }
            }
            OpKind::ExtractSlice { result, source, sizes, .. } => {
                let s = sizes.iter().map(|e| self.eval(e, op)).collect::<Result<Vec<_>, _>>()?;
                self.shapes.insert(*result, s);
                let r = self.roots.get(source).copied().unwrap_or(*source);
                self.roots.insert(*result, r);
            }
            OpKind::Copy { src, .. } => {
                let bytes = self.view_bytes(*src);
                self.now = self.dma(bytes);
            }
            OpKind::DmaStart { src, tag, .. } => {
                let bytes = self.view_bytes(*src);
                let done = self.dma(bytes);
                self.dma.insert(*tag, done);
            }
            OpKind::DmaWait { tag } => {
                let done = self.dma.remove(tag).ok_or_else(|| err(op, "wait on idle tag"))?;
                self.now = self.now.max(done);
            }
            OpKind::Alloc { .. } | OpKind::Dealloc { .. } => {}
            OpKind::AsyncGroup { group, .. } => {
                self.groups.insert(*group, Vec::new());
            }
            OpKind::AsyncExecute { token, body } => {
                self.spawn();
                let job = self.run_child(None, body)?;
                self.tokens.insert(*token, job);
            }
            OpKind::AddToGroup { group, token } => {
                let d = self.tokens.remove(token).ok_or_else(|| err(op, "unknown token"))?;
                self.groups.get_mut(group).ok_or_else(|| err(op, "unknown group"))?.push(d);
            }
            OpKind::AwaitAll { group } => {
                let jobs = self.groups.remove(group).ok_or_else(|| err(op, "unknown group"))?;
                self.join(&jobs);
            }
            OpKind::StoreToggle { cell, value } => {
                let v = self.eval(value, op)?;
                self.toggles.insert(*cell, v);
            }
            OpKind::LoadToggle { cell, result } => {
                let v = *self.toggles.get(cell).ok_or_else(|| err(op, "load of unset toggle"))?;
                self.vars.insert(*result, v);
            }
        }
        Ok(())
    }

    /// Chunks of a vector loop cost the same, so one iteration is costed and
    /// scaled. The working set is the full extent the loop sweeps.
    fn vector_loop(&mut self, op: &Op, var: Var, lo: i64, hi: i64, step: i64, body: &[Op]) -> Result<(), PerfError> {
        let trips = if hi > lo { (hi - lo + step - 1) / step } else { 0 };
        if trips == 0 {
            return Ok(());
        }
        self.vars.insert(var, lo);
        let mut per_iter = 0.0;
        let mut ws = 0.0;
        let mut sliced = HashMap::new();
        for o in body {
            match &o.kind {
                OpKind::ExtractSlice { result, source, .. } => {
                    self.op(o)?;
                    sliced.insert(*result, *source);
                }
                OpKind::Generic(g) => {
                    let (c, _) = self.generic_cycles(o, g)?;
                    per_iter += c;
                    for v in g.inputs.iter().chain(&g.outputs) {
                        ws += self.view_bytes(*sliced.get(v).unwrap_or(v));
                    }
                }
                _ => return Err(err(op, "unexpected op in vector loop")),
            }
        }
        let c = self.spill(per_iter * trips as f64, ws);
        self.add_compute(c);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::driver::{apply_pass, PassKind, PassOptions};
    use crate::frontend::{compile_source, RowShape};

    fn gelu(n: usize) -> KernelProgram {
        compile_source(crate::shipped::get("gelu").unwrap().source, RowShape::one_d(n)).unwrap()
    }

    fn staged(p: &KernelProgram, passes: &[PassKind], tile: usize) -> KernelProgram {
        let opts = PassOptions { tile_sizes: Some(vec![tile]), ..PassOptions::default() };
        passes.iter().fold(p.clone(), |acc, k| apply_pass(&acc, *k, &opts).unwrap())
    }

    #[test]
    fn untiled_program_is_pure_compute() {
        let cfg = MachineConfig::default();
        let r = simulate(&gelu(100), &cfg).unwrap();
        assert_eq!(r.transfer_cycles, 0.0);
        assert_eq!(r.total_cycles, r.compute_cycles);
        assert_eq!(r.memory_fraction, 0.0);
    }

    #[test]
    fn copies_cost_latency_plus_bandwidth() {
        let cfg = MachineConfig::default();
        let p = staged(&gelu(1024), &[PassKind::Tile], 1024);
        let r = simulate(&p, &cfg).unwrap();
        let one = cfg.dma_latency_cycles + 4096.0 / cfg.dma_bandwidth_bytes_per_cycle;
        assert_eq!(r.transfer_cycles, 2.0 * one);
        assert_eq!(r.total_cycles, r.compute_cycles + r.transfer_cycles);
    }

    #[test]
    fn double_buffering_hides_transfers() {
        let cfg = MachineConfig { dma_bandwidth_bytes_per_cycle: 1.0, ..MachineConfig::default() };
        let base = staged(&gelu(4096), &[PassKind::Tile], 1024);
        let db = staged(&gelu(4096), &[PassKind::Tile, PassKind::Db], 1024);
        let (a, b) = (simulate(&base, &cfg).unwrap(), simulate(&db, &cfg).unwrap());
        assert!(b.total_cycles < a.total_cycles);
        assert!(b.overlapped_cycles > 0.0);
        assert!(b.total_cycles >= b.compute_cycles.max(b.transfer_cycles));
    }

    #[test]
    fn vectorization_divides_compute() {
        let cfg = MachineConfig::default();
        let p = gelu(4096);
        let v = staged(&p, &[PassKind::Vectorize], 4096);
        let (s, w) = (simulate(&p, &cfg).unwrap(), simulate(&v, &cfg).unwrap());
        assert_eq!(s.compute_cycles / w.compute_cycles, 32.0);
    }

    #[test]
    fn narrow_elements_double_lanes() {
        let cfg = MachineConfig::default();
        let p = staged(&gelu(4096), &[PassKind::Vectorize], 4096);
        let mut h = p.clone();
        for d in &mut h.decls {
            d.elem = crate::ir::ElemType::F16;
        }
        let (a, b) = (simulate(&p, &cfg).unwrap(), simulate(&h, &cfg).unwrap());
        assert_eq!(a.compute_cycles / b.compute_cycles, 2.0);
    }

    #[test]
    fn makespan_respects_contexts() {
        let cfg = MachineConfig { num_hvx_contexts: 2, ..MachineConfig::default() };
        let p = KernelProgram::new("k");
        let s = Sim::new(&p, &cfg, HashMap::new(), HashMap::new(), HashMap::new());
        assert_eq!(s.makespan(&[3.0, 3.0, 3.0, 3.0]), 6.0);
        assert_eq!(s.makespan(&[5.0, 1.0, 1.0]), 5.0);
    }

    #[test]
    fn wait_without_start_is_an_error() {
        let mut p = KernelProgram::new("k");
        let t = p.add_tag("t");
        let w = p.op(OpKind::DmaWait { tag: t });
        p.body.push(w);
        assert!(matches!(simulate(&p, &MachineConfig::default()), Err(PerfError::Schedule(_))));
    }
}
