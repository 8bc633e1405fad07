use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::ir::{BinaryOp, UnaryOp};

use super::PerfError;

/// Cycle costs of one scalar payload node.
#[derive(Clone, Debug, PartialEq)]
pub struct OpCycles {
    pub add: f64,
    pub mul: f64,
    pub div: f64,
    pub max: f64,
    pub neg: f64,
    pub exp: f64,
    pub tanh: f64,
    pub sqrt: f64,
    pub rsqrt: f64,
    pub exp_approx: f64,
    pub tanh_approx: f64,
    pub rsqrt_approx: f64,
}

impl OpCycles {
    pub fn unary(&self, op: UnaryOp) -> f64 {
        match op {
            UnaryOp::Neg => self.neg,
            UnaryOp::Exp => self.exp,
            UnaryOp::Tanh => self.tanh,
            UnaryOp::Sqrt => self.sqrt,
            UnaryOp::Rsqrt => self.rsqrt,
            UnaryOp::ExpApprox(_) => self.exp_approx,
            UnaryOp::TanhApprox(_) => self.tanh_approx,
            UnaryOp::RsqrtApprox(_) => self.rsqrt_approx,
        }
    }

    pub fn binary(&self, op: BinaryOp) -> f64 {
        match op {
            BinaryOp::Add | BinaryOp::Sub => self.add,
            BinaryOp::Mul => self.mul,
            BinaryOp::Div => self.div,
            BinaryOp::Max => self.max,
        }
    }

    fn fields_mut(&mut self) -> [(&'static str, &mut f64); 12] {
        [
            ("add", &mut self.add),
            ("mul", &mut self.mul),
            ("div", &mut self.div),
            ("max", &mut self.max),
            ("neg", &mut self.neg),
            ("exp", &mut self.exp),
            ("tanh", &mut self.tanh),
            ("sqrt", &mut self.sqrt),
            ("rsqrt", &mut self.rsqrt),
            ("exp_approx", &mut self.exp_approx),
            ("tanh_approx", &mut self.tanh_approx),
            ("rsqrt_approx", &mut self.rsqrt_approx),
        ]
    }
}

/// Machine parameters of the cost model. Text form is one `key = value` per
/// line; `#` starts a comment. See `configs/default.machine`.
#[derive(Clone, Debug, PartialEq)]
pub struct MachineConfig {
    pub dma_bandwidth_bytes_per_cycle: f64,
    pub dma_latency_cycles: f64,
    pub op_cycles: OpCycles,
    /// Cycles per operand element read or written by a generic.
    pub access_cycles: f64,
    /// Fraction of the nominal width realized by `vectorized(W)` regions.
    pub vector_width_effect: f64,
    pub num_hvx_contexts: usize,
    pub thread_spawn_cycles: f64,
    pub barrier_cycles: f64,
    pub tcm_bytes: usize,
    /// Working set one context holds before compute slows by `spill_factor`.
    pub context_ws_bytes: usize,
    pub spill_factor: f64,
}

pub const DEFAULT_CONFIG_TEXT: &str = include_str!("../../../../configs/default.machine");

impl Default for MachineConfig {
    fn default() -> Self {
        DEFAULT_CONFIG_TEXT.parse().expect("committed default machine config parses")
    }
}

impl MachineConfig {
    /// Default config with DMA latency, spawn and barrier costs removed.
    pub fn zero_overhead() -> Self {
        Self { dma_latency_cycles: 0.0, thread_spawn_cycles: 0.0, barrier_cycles: 0.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), PerfError> {
        let mut c = self.clone();
        let mut nonneg: Vec<(&str, f64)> = vec![
            ("dma_latency_cycles", c.dma_latency_cycles),
            ("access_cycles", c.access_cycles),
            ("thread_spawn_cycles", c.thread_spawn_cycles),
            ("barrier_cycles", c.barrier_cycles),
        ];
        nonneg.extend(c.op_cycles.fields_mut().into_iter().map(|(k, v)| (k, *v)));
        for (k, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(PerfError::Config(format!("{k} must be a finite non-negative number, got {v}")));
            }
        }
        if !(self.dma_bandwidth_bytes_per_cycle > 0.0) {
            return Err(PerfError::Config("dma_bandwidth_bytes_per_cycle must be positive".into()));
        }
        if !(self.vector_width_effect > 0.0 && self.vector_width_effect <= 1.0) {
            return Err(PerfError::Config("vector_width_effect must be in (0, 1]".into()));
        }
        if !(self.spill_factor >= 1.0 && self.spill_factor.is_finite()) {
            return Err(PerfError::Config("spill_factor must be at least 1".into()));
        }
        if self.num_hvx_contexts < 1 || self.tcm_bytes < 1 || self.context_ws_bytes < 1 {
            return Err(PerfError::Config("num_hvx_contexts, tcm_bytes and context_ws_bytes must be positive".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PerfError> {
        let text = fs::read_to_string(path).map_err(|e| PerfError::Config(format!("{}: {e}", path.display())))?;
        text.parse().map_err(|e: PerfError| PerfError::Config(format!("{}: {e}", path.display())))
    }

    fn set(&mut self, key: &str, value: &str) -> Result<(), PerfError> {
        let num = || value.parse::<f64>().map_err(|_| PerfError::Config(format!("`{key}`: bad number `{value}`")));
        let int = || value.parse::<usize>().map_err(|_| PerfError::Config(format!("`{key}`: bad integer `{value}`")));
        match key {
            "dma_bandwidth_bytes_per_cycle" => self.dma_bandwidth_bytes_per_cycle = num()?,
            "dma_latency_cycles" => self.dma_latency_cycles = num()?,
            "access_cycles" => self.access_cycles = num()?,
            "vector_width_effect" => self.vector_width_effect = num()?,
            "num_hvx_contexts" => self.num_hvx_contexts = int()?,
            "thread_spawn_cycles" => self.thread_spawn_cycles = num()?,
            "barrier_cycles" => self.barrier_cycles = num()?,
            "tcm_bytes" => self.tcm_bytes = int()?,
            "context_ws_bytes" => self.context_ws_bytes = int()?,
            "spill_factor" => self.spill_factor = num()?,
            _ => {
                let op = key.strip_prefix("op.").ok_or_else(|| PerfError::Config(format!("unknown key `{key}`")))?;
                let v = num()?;
                let slot = self
                    .op_cycles
                    .fields_mut()
                    .into_iter()
                    .find(|(k, _)| *k == op)
                    .ok_or_else(|| PerfError::Config(format!("unknown key `{key}`")))?;
                *slot.1 = v;
            }
        }
        Ok(())
    }

    fn blank() -> Self {
        let ops = OpCycles {
            add: f64::NAN,
            mul: f64::NAN,
            div: f64::NAN,
            max: f64::NAN,
            neg: f64::NAN,
            exp: f64::NAN,
            tanh: f64::NAN,
            sqrt: f64::NAN,
            rsqrt: f64::NAN,
            exp_approx: f64::NAN,
            tanh_approx: f64::NAN,
            rsqrt_approx: f64::NAN,
        };
        Self {
            dma_bandwidth_bytes_per_cycle: f64::NAN,
            dma_latency_cycles: f64::NAN,
            op_cycles: ops,
            access_cycles: f64::NAN,
            vector_width_effect: f64::NAN,
            num_hvx_contexts: 0,
            thread_spawn_cycles: f64::NAN,
            barrier_cycles: f64::NAN,
            tcm_bytes: 0,
            context_ws_bytes: 0,
            spill_factor: f64::NAN,
        }
    }
}

const TOP_KEYS: [&str; 10] = [
    "dma_bandwidth_bytes_per_cycle",
    "dma_latency_cycles",
    "access_cycles",
    "vector_width_effect",
    "num_hvx_contexts",
    "thread_spawn_cycles",
    "barrier_cycles",
    "tcm_bytes",
    "context_ws_bytes",
    "spill_factor",
];

impl FromStr for MachineConfig {
    type Err = PerfError;

    /// Every key must be present exactly once.
    fn from_str(text: &str) -> Result<Self, PerfError> {
        let mut c = Self::blank();
        let mut seen = std::collections::HashSet::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| PerfError::Config(format!("line {}: expected key = value", n + 1)))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(PerfError::Config(format!("line {}: duplicate key `{k}`", n + 1)));
            }
            c.set(k, v.trim()).map_err(|e| PerfError::Config(format!("line {}: {e}", n + 1)))?;
        }
        let mut keys: Vec<String> = TOP_KEYS.iter().map(|k| k.to_string()).collect();
        keys.extend(c.op_cycles.fields_mut().iter().map(|(k, _)| format!("op.{k}")));
        if let Some(k) = keys.iter().find(|k| !seen.contains(*k)) {
            return Err(PerfError::Config(format!("missing key `{k}`")));
        }
        c.validate()?;
        Ok(c)
    }
}

impl fmt::Display for MachineConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "dma_bandwidth_bytes_per_cycle = {}", self.dma_bandwidth_bytes_per_cycle)?;
        writeln!(f, "dma_latency_cycles = {}", self.dma_latency_cycles)?;
        writeln!(f, "access_cycles = {}", self.access_cycles)?;
        writeln!(f, "vector_width_effect = {}", self.vector_width_effect)?;
        writeln!(f, "num_hvx_contexts = {}", self.num_hvx_contexts)?;
        writeln!(f, "thread_spawn_cycles = {}", self.thread_spawn_cycles)?;
        writeln!(f, "barrier_cycles = {}", self.barrier_cycles)?;
        writeln!(f, "tcm_bytes = {}", self.tcm_bytes)?;
        writeln!(f, "context_ws_bytes = {}", self.context_ws_bytes)?;
        writeln!(f, "spill_factor = {}", self.spill_factor)?;
        let mut ops = self.op_cycles.clone();
        for (k, v) in ops.fields_mut() {
            writeln!(f, "op.{k} = {v}")?;
        }
        Ok(())
    }
}
