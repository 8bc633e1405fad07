use std::fmt;
use std::io::{self, Write};
use std::str::FromStr;

use crate::driver::{run_program, PassKind, PassOptions, PipelineSpec, VerifyMode};
use crate::frontend::{compile_source, RowShape};
use crate::ir::{KernelProgram, MemSpace};
use crate::shipped::ShippedKernel;

use super::{simulate, MachineConfig, PerfError, TimingReport};

pub const CSV_HEADER: &str = "kernel,size,passes,cycles,compute,transfer,overhead,m,speedup";

/// GELU sizes of the single- vs multi-threaded series, 8K to 1M elements.
pub const SWEEP_SIZES: [usize; 8] = [8192, 16384, 32768, 65536, 131072, 262144, 524288, 1048576];

pub const DEFAULT_PASS_SWEEP_SIZE: usize = 262144;

pub const M_POINTS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    Size,
    MemoryFraction,
    Passes,
}

impl FromStr for SweepAxis {
    type Err = PerfError;
    fn from_str(s: &str) -> Result<Self, PerfError> {
        match s {
            "size" => Ok(SweepAxis::Size),
            "m" => Ok(SweepAxis::MemoryFraction),
            "passes" => Ok(SweepAxis::Passes),
            _ => Err(PerfError::Sweep(format!("unknown axis `{s}` (expected size, m or passes)"))),
        }
    }
}

/// A named pass set of a ladder.
#[derive(Clone, Debug, PartialEq)]
pub struct Rung {
    pub label: &'static str,
    pub passes: Vec<PassKind>,
}

impl Rung {
    pub fn named(label: &str) -> Option<Rung> {
        use PassKind::*;
        let (label, passes) = match label {
            "scalar" => ("scalar", vec![Fuse, Tile]),
            "vec" => ("vec", vec![Fuse, Tile, Vectorize]),
            "vec+db" => ("vec+db", vec![Fuse, Tile, Vectorize, Db]),
            "vec+mt" => ("vec+mt", vec![Fuse, Tile, Vectorize, Mt, Async]),
            "vec+mt+db" => ("vec+mt+db", vec![Fuse, Tile, Vectorize, Mt, Async, Db]),
            _ => return None,
        };
        Some(Rung { label, passes })
    }
}

impl fmt::Display for Rung {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label)
    }
}

pub const DEFAULT_LADDER: &str = "scalar,vec,vec+mt,vec+mt+db";

pub fn parse_ladder(s: &str) -> Result<Vec<Rung>, PerfError> {
    s.split(',')
        .map(|l| {
            let l = l.trim();
            Rung::named(l).ok_or_else(|| {
                PerfError::Sweep(format!("unknown rung `{l}` (expected scalar, vec, vec+db, vec+mt or vec+mt+db)"))
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub kernel: String,
    pub size: usize,
    pub passes: String,
    pub report: TimingReport,
    pub speedup: f64,
}

pub fn write_csv(rows: &[SweepRow], out: &mut dyn Write) -> io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in rows {
        let t = &r.report;
        writeln!(
            out,
            "{},{},{},{:.1},{:.1},{:.1},{:.1},{:.6},{:.6}",
            r.kernel,
            r.size,
            r.passes,
            t.total_cycles,
            t.compute_cycles,
            t.transfer_cycles,
            t.overhead_cycles,
            t.memory_fraction,
            r.speedup
        )?;
    }
    Ok(())
}

/// Row shape holding `size` elements: 1-D kernels take it whole, 2-D kernels
/// keep their default row length.
pub fn shape_for_size(kernel: &ShippedKernel, size: usize) -> Result<RowShape, PerfError> {
    match kernel.default_shape.rows {
        None => Ok(RowShape::one_d(size)),
        Some(_) => {
            let cols = kernel.default_shape.cols;
            if size == 0 || !size.is_multiple_of(cols) {
                return Err(PerfError::Sweep(format!("{}: size {size} is not a multiple of {cols}", kernel.name)));
            }
            Ok(RowShape::two_d(size / cols, cols))
        }
    }
}

/// Pass options used by the sweeps: the machine's TCM and a threading
/// threshold of one element, so every rung with `mt` is threaded.
fn sweep_options(cfg: &MachineConfig) -> PassOptions {
    let mut o = PassOptions { tcm_bytes: cfg.tcm_bytes, ..PassOptions::default() };
    o.threading.threshold = 1;
    o
}

pub fn simulate_passes(
    program: &KernelProgram,
    passes: &[PassKind],
    options: &PassOptions,
    cfg: &MachineConfig,
) -> Result<TimingReport, PerfError> {
    let spec = PipelineSpec { passes: passes.to_vec(), options: options.clone(), verify: VerifyMode::Off };
    let result = run_program(program.clone(), &spec, None)?;
    simulate(result.final_program(), cfg)
}

fn ladder_rows(
    kernel: &ShippedKernel,
    size: usize,
    rungs: &[Rung],
    cfg: &MachineConfig,
) -> Result<Vec<SweepRow>, PerfError> {
    let program = compile_source(kernel.source, shape_for_size(kernel, size)?).map_err(crate::driver::DriverError::from)?;
    let opts = sweep_options(cfg);
    let mut rows: Vec<SweepRow> = Vec::with_capacity(rungs.len());
    for rung in rungs {
        let report = simulate_passes(&program, &rung.passes, &opts, cfg)?;
        let base = rows.first().map_or(report.total_cycles, |r| r.report.total_cycles);
        rows.push(SweepRow {
            kernel: kernel.name.into(),
            size,
            passes: rung.label.into(),
            report,
            speedup: base / report.total_cycles,
        });
    }
    Ok(rows)
}

/// For every size, one row per rung; speedups are relative to the first rung
/// at the same size.
pub fn size_sweep(
    kernel: &ShippedKernel,
    sizes: &[usize],
    rungs: &[Rung],
    cfg: &MachineConfig,
) -> Result<Vec<SweepRow>, PerfError> {
    let mut rows = Vec::new();
    for &n in sizes {
        rows.extend(ladder_rows(kernel, n, rungs, cfg)?);
    }
    Ok(rows)
}

/// One row per rung at `size`; speedups are relative to the first rung.
pub fn pass_sweep(kernel: &ShippedKernel, size: usize, rungs: &[Rung], cfg: &MachineConfig) -> Result<Vec<SweepRow>, PerfError> {
    ladder_rows(kernel, size, rungs, cfg)
}

/// `y = x * 1.5` with `y` resident in TCM, so tiling stages only `x` and each
/// tile costs one input transfer and one multiply per element.
pub fn synthetic_overlap_kernel(n: usize) -> KernelProgram {
    let mut p = compile_source("kernel overlap(x: row<f32>) -> (y: row<f32>) { y = x * 1.5; }", RowShape::one_d(n))
        .expect("synthetic kernel compiles");
    let y = p.decl_by_name("y").expect("output y").id;
    p.decl_mut(y).unwrap().space = MemSpace::Tcm;
    p
}

/// Zero-overhead machine on which the synthetic kernel has memory fraction
/// `m`: 4-byte elements at 4 bytes/cycle cost one transfer cycle each, and
/// the multiply costs `(1 - m) / m`. `m = 0` uses infinite bandwidth.
pub fn ideal_overlap_config(m: f64) -> Result<MachineConfig, PerfError> {
    super::ideal_overlap_speedup(m)?;
    let mut c = MachineConfig::zero_overhead();
    c.access_cycles = 0.0;
    if m == 0.0 {
        c.dma_bandwidth_bytes_per_cycle = f64::INFINITY;
        c.op_cycles.mul = 1.0;
    } else {
        c.dma_bandwidth_bytes_per_cycle = 4.0;
        c.op_cycles.mul = (1.0 - m) / m;
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OverlapPoint {
    pub m: f64,
    /// Steady-state cycles per tile without and with double buffering.
    pub step_no_db: f64,
    pub step_db: f64,
    pub no_db: TimingReport,
    pub db: TimingReport,
}

impl OverlapPoint {
    pub fn speedup(&self) -> f64 {
        self.step_no_db / self.step_db
    }
}

const OVERLAP_TILE: usize = 1024;
const OVERLAP_TILES: usize = 8;

/// Double-buffering speedup of the synthetic kernel in steady state: the
/// cost of one extra tile with and without DB, which leaves out the
/// unoverlapped first load and last compute.
pub fn measure_overlap(cfg: &MachineConfig) -> Result<OverlapPoint, PerfError> {
    let mut opts = PassOptions { tile_sizes: Some(vec![OVERLAP_TILE]), ..sweep_options(cfg) };
    opts.tcm_bytes = opts.tcm_bytes.max(8 * OVERLAP_TILE);
    let plain = [PassKind::Fuse, PassKind::Tile];
    let dbl = [PassKind::Fuse, PassKind::Tile, PassKind::Db];
    let run = |tiles: usize, passes: &[PassKind]| simulate_passes(&synthetic_overlap_kernel(tiles * OVERLAP_TILE), passes, &opts, cfg);
    let (a0, a1) = (run(OVERLAP_TILES, &plain)?, run(OVERLAP_TILES + 1, &plain)?);
    let (b0, b1) = (run(OVERLAP_TILES, &dbl)?, run(OVERLAP_TILES + 1, &dbl)?);
    Ok(OverlapPoint {
        m: a1.memory_fraction,
        step_no_db: a1.total_cycles - a0.total_cycles,
        step_db: b1.total_cycles - b0.total_cycles,
        no_db: a1,
        db: b1,
    })
}

/// no-db / db row pairs of the synthetic kernel at each `m`; the db row's
/// speedup is the steady-state ratio.
pub fn memory_fraction_sweep(ms: &[f64]) -> Result<Vec<SweepRow>, PerfError> {
    let mut rows = Vec::new();
    for &m in ms {
        let pt = measure_overlap(&ideal_overlap_config(m)?)?;
        let size = (OVERLAP_TILES + 1) * OVERLAP_TILE;
        let row = |passes: &str, report, speedup| SweepRow { kernel: "overlap".into(), size, passes: passes.into(), report, speedup };
        rows.push(row("no-db", pt.no_db, 1.0));
        rows.push(row("db", pt.db, pt.speedup()));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ladder_parses_known_rungs() {
        let l = parse_ladder(DEFAULT_LADDER).unwrap();
        assert_eq!(l.iter().map(|r| r.label).collect::<Vec<_>>(), ["scalar", "vec", "vec+mt", "vec+mt+db"]);
        assert!(parse_ladder("vec,turbo").is_err());
    }

    #[test]
    fn empty_csv_is_header_only() {
        let mut out = Vec::new();
        write_csv(&[], &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), format!("{CSV_HEADER}\n"));
    }

    #[test]
    fn overlap_config_sets_memory_fraction() {
        for m in M_POINTS {
            let pt = measure_overlap(&ideal_overlap_config(m).unwrap()).unwrap();
            assert!((pt.m - m).abs() < 1e-12, "m = {m}: measured {}", pt.m);
        }
    }
}
