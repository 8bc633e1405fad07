//! Acceptance suite: one PASS/FAIL line per criterion. Exits non-zero if any
//! criterion fails.

use std::collections::HashMap;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use tcmc_core::driver::{random_inputs, run_program, PassKind, PassOptions, PipelineSpec, VerifyMode};
use tcmc_core::frontend::{compile_source, RowShape};
use tcmc_core::interp::{compare_outputs, interpret, interpret_with, CompareMode, FaultKind, InterpOptions, TraceEvent};
use tcmc_core::ir::{KernelProgram, Op, OpId};
use tcmc_core::mathlib::{exp_approx, inv_sqrt_fast, ApproxPolicy};
use tcmc_core::oracles::{gen_random_program, oracle_eval, output_coverage, scan_schedule, RandomProgramSpec};
use tcmc_core::passes::double_buffer::{DB_PING, DB_PONG, DB_PREFETCH, DB_PROLOGUE};
use tcmc_core::passes::fuse_elementwise;
use tcmc_core::perf::{
    ideal_overlap_config, ideal_overlap_speedup, measure_overlap, parse_ladder, pass_sweep, size_sweep, MachineConfig,
    DEFAULT_PASS_SWEEP_SIZE, M_POINTS, SWEEP_SIZES,
};
use tcmc_core::shipped::{self, KERNELS};

type Outcome = Result<String, String>;

const SHAPES: [RowShape; 3] = [
    RowShape { rows: None, cols: 1000 },
    RowShape { rows: Some(8), cols: 64 },
    RowShape { rows: Some(127), cols: 513 },
];

const SEMANTIC_BUDGET: Duration = Duration::from_secs(60);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Option sets the pipeline runs under: the defaults, and a small TCM with a
/// low threading threshold so that every shape gets several tiles and threads.
fn option_sets() -> Vec<(&'static str, PassOptions)> {
    let mut small = PassOptions { tcm_bytes: 64 << 10, ..PassOptions::default() };
    small.threading.threshold = 256;
    vec![("default", PassOptions::default()), ("small-tcm", small)]
}

fn semantic_preservation() -> Outcome {
    let start = Instant::now();
    let mut runs = 0;
    for k in &KERNELS {
        for shape in SHAPES {
            for (label, opts) in option_sets() {
                let p = compile_source(k.source, shape).map_err(|e| e.to_string())?;
                let spec = PipelineSpec { passes: PassKind::FULL.to_vec(), options: opts, verify: VerifyMode::BitExact };
                // Every stage is compared with stage 0, so one run checks all prefixes.
                let r = run_program(p, &spec, None).map_err(|e| format!("{} {shape:?} {label}: {e}", k.name))?;
                runs += r.stages.len();
            }
        }
    }
    let t = start.elapsed();
    ensure(t < SEMANTIC_BUDGET, || format!("took {t:?}"))?;
    Ok(format!("{runs} stage checks bit-exact in {:.1}s", t.as_secs_f64()))
}

fn ideal_overlap_law() -> Outcome {
    let mut got = Vec::new();
    for m in M_POINTS {
        let pt = measure_overlap(&ideal_overlap_config(m).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        let want = ideal_overlap_speedup(m).unwrap();
        let s = pt.speedup();
        ensure((pt.m - m).abs() <= 1e-9, || format!("m = {m}: synthetic kernel measured m = {}", pt.m))?;
        ensure((s - want).abs() <= 1e-9, || format!("m = {m}: speedup {s}, ideal {want}"))?;
        if m == 0.0 || m == 1.0 {
            ensure(s == 1.0, || format!("m = {m}: endpoint speedup {s} is not exactly 1"))?;
        }
        got.push(format!("{s:.6}"));
    }
    Ok(format!("speedups [{}]", got.join(", ")))
}

fn mt_crossover() -> Outcome {
    let cfg = MachineConfig::default();
    let rungs = parse_ladder("vec+db,vec+mt+db").unwrap();
    let rows = size_sweep(shipped::get("gelu").unwrap(), &SWEEP_SIZES, &rungs, &cfg).map_err(|e| e.to_string())?;
    let mut ratios = Vec::new();
    for pair in rows.chunks(2) {
        let (st, mt) = (&pair[0], &pair[1]);
        let ratio = st.report.total_cycles / mt.report.total_cycles;
        let n = st.size;
        if n <= 16384 {
            ensure(ratio < 1.0, || format!("MT/ST at {n} is {ratio:.3}, expected < 1"))?;
        }
        if n >= 32768 {
            ensure(ratio >= 2.0, || format!("MT/ST at {n} is {ratio:.3}, expected >= 2"))?;
        }
        ratios.push(format!("{}K {ratio:.2}", n / 1024));
    }
    Ok(ratios.join(", "))
}

fn pass_ladder_trends() -> Outcome {
    let cfg = MachineConfig::default();
    let ladder = parse_ladder("scalar,vec,vec+mt,vec+mt+db").unwrap();
    let rows = pass_sweep(shipped::get("vecadd2d").unwrap(), DEFAULT_PASS_SWEEP_SIZE, &ladder, &cfg)
        .map_err(|e| e.to_string())?;
    let c: Vec<f64> = rows.iter().map(|r| r.report.total_cycles).collect();
    ensure(c[0] > c[1] && c[1] > c[2] && c[2] >= c[3], || format!("vecadd2d cycles {c:?}"))?;
    let ladder = parse_ladder("vec,vec+db,vec+mt").unwrap();
    let rows = pass_sweep(shipped::get("expseries").unwrap(), DEFAULT_PASS_SWEEP_SIZE, &ladder, &cfg)
        .map_err(|e| e.to_string())?;
    let e: Vec<f64> = rows.iter().map(|r| r.report.total_cycles).collect();
    let db_gap = (e[1] - e[0]).abs() / e[0];
    let mt_gain = e[0] / e[2];
    ensure(db_gap <= 0.05, || format!("expseries vec vs vec+db differ by {:.1}%", db_gap * 100.0))?;
    ensure(mt_gain >= 3.0, || format!("expseries vec+mt only {mt_gain:.2}x better than vec"))?;
    Ok(format!(
        "vecadd2d {:.0} > {:.0} > {:.0} >= {:.0}; expseries vec/vec+db gap {:.2}%, vec+mt {mt_gain:.2}x",
        c[0],
        c[1],
        c[2],
        c[3],
        db_gap * 100.0
    ))
}

fn fusion_structure() -> Outcome {
    let k = shipped::get("softmax").unwrap();
    let p = compile_source(k.source, k.default_shape).map_err(|e| e.to_string())?;
    let f = fuse_elementwise(&p);
    let count = |p: &KernelProgram| p.count_ops(|o| o.as_generic().is_some());
    let (before, after) = (count(&p), count(&f));
    ensure(after < before, || format!("generic count {before} -> {after}"))?;
    let merged = f.body.iter().filter_map(Op::as_generic).any(|g| g.payloads.iter().any(|e| e.to_string().contains("exp(sub(")));
    ensure(merged, || "no generic computes exp(sub(..)) after fusion".into())?;
    let inputs = random_inputs(&p, 5);
    let (a, b) = (interpret(&p, &inputs).map_err(|e| e.to_string())?, interpret(&f, &inputs).map_err(|e| e.to_string())?);
    let r = compare_outputs(&a, &b, CompareMode::BitExact).map_err(|e| e.to_string())?;
    ensure(r.passed(), || r.to_string())?;
    Ok(format!("softmax generics {before} -> {after}, sub+exp merged, output bit-exact"))
}

/// Annotations of every op's enclosing ops, by op id.
fn ancestry(ops: &[Op], stack: &mut Vec<Vec<String>>, out: &mut HashMap<OpId, Vec<String>>) {
    for op in ops {
        out.insert(op.id, stack.iter().flatten().cloned().collect());
        if let Some(body) = op.kind.body() {
            stack.push(op.annotations.iter().cloned().collect());
            ancestry(body, stack, out);
            stack.pop();
        }
    }
}

fn strip_db_waits(ops: &mut Vec<Op>) {
    ops.retain(|o| !o.has("db_wait"));
    for o in ops {
        if let Some(b) = o.kind.body_mut() {
            strip_db_waits(b);
        }
    }
}

fn double_buffer_structure() -> Outcome {
    let k = shipped::get("gelu").unwrap();
    let p = compile_source(k.source, RowShape::one_d(4096)).map_err(|e| e.to_string())?;
    let opts = PassOptions { tile_sizes: Some(vec![1024]), ..PassOptions::default() };
    let spec = PipelineSpec { passes: vec![PassKind::Fuse, PassKind::Tile, PassKind::Db], options: opts, verify: VerifyMode::BitExact };
    let inputs = random_inputs(&p, 3);
    let r = run_program(p, &spec, Some(&inputs)).map_err(|e| e.to_string())?;
    let d = r.final_program().clone();
    let trace = interpret_with(&d, &inputs, InterpOptions { trace: true, ..Default::default() })
        .map_err(|e| e.to_string())?
        .trace;
    let mut anc = HashMap::new();
    ancestry(&d.body, &mut Vec::new(), &mut anc);
    let within = |op: &OpId, a: &str| anc.get(op).is_some_and(|v| v.iter().any(|s| s == a));
    let load = |tag: &str| tag.starts_with("x_");

    let starts: Vec<(OpId, &str)> = trace
        .iter()
        .filter_map(|e| match e {
            TraceEvent::DmaStart { op, tag, .. } if load(tag) => Some((*op, tag.as_str())),
            _ => None,
        })
        .collect();
    let prologue = starts.iter().filter(|(op, _)| within(op, DB_PROLOGUE)).count();
    let prefetch = starts.iter().filter(|(op, _)| within(op, DB_PREFETCH)).count();
    ensure(prologue == 1 && prefetch == 3 && starts.len() == 4, || {
        format!("{} load starts: {prologue} prologue, {prefetch} prefetch", starts.len())
    })?;

    // Exactly one wait on an input tag between consecutive computes.
    let mut waits = 0;
    let mut computes = 0;
    for e in &trace {
        match e {
            TraceEvent::DmaWait { tag, .. } if load(tag) => waits += 1,
            TraceEvent::Generic { .. } => {
                ensure(waits == 1, || format!("compute #{computes} preceded by {waits} input waits"))?;
                waits = 0;
                computes += 1;
            }
            _ => {}
        }
    }
    ensure(computes == 4, || format!("{computes} computes"))?;

    let kernels: Vec<&str> = trace
        .iter()
        .filter_map(|e| match e {
            TraceEvent::Branch { annotations, .. } if annotations.iter().any(|a| a == DB_PING) => Some("ping"),
            TraceEvent::Branch { annotations, .. } if annotations.iter().any(|a| a == DB_PONG) => Some("pong"),
            _ => None,
        })
        .collect();
    ensure(kernels == ["ping", "pong", "ping", "pong"], || format!("kernel order {kernels:?}"))?;

    // Each dynamic start on a tag is matched by exactly one wait before the next start.
    let mut open: HashMap<&str, bool> = HashMap::new();
    for e in &trace {
        match e {
            TraceEvent::DmaStart { tag, .. } => {
                ensure(!open.insert(tag, true).unwrap_or(false), || format!("{tag} restarted before its wait"))?
            }
            TraceEvent::DmaWait { tag, .. } => {
                ensure(open.insert(tag, false).unwrap_or(false), || format!("{tag} waited without a start"))?
            }
            _ => {}
        }
    }
    ensure(open.values().all(|v| !v), || "a tag was started and never waited".into())?;

    let scan = scan_schedule(&d).map_err(|e| e.to_string())?;
    ensure(scan.count("alloc") == scan.count("dealloc"), || {
        format!("{} allocs vs {} deallocs", scan.count("alloc"), scan.count("dealloc"))
    })?;

    let mut mutant = d.clone();
    strip_db_waits(&mut mutant.body);
    match interpret(&mutant, &inputs) {
        Err(e) if e.kind == FaultKind::ReadBeforeDmaComplete => {}
        other => return Err(format!("mutant without waits did not fault as expected: {other:?}")),
    }
    Ok("1 prologue + 3 prefetch starts, one wait per compute, ping/pong/ping/pong, tags balanced, mutant faults".into())
}

fn math_accuracy() -> Outcome {
    let n = 100_000;
    let mut worst_exp = 0.0f64;
    for i in 0..=n {
        let x = -10.0 + 20.0 * i as f64 / n as f64;
        let got = exp_approx(x as f32) as f64;
        let want = (x as f32 as f64).exp();
        worst_exp = worst_exp.max((got - want).abs() / want);
    }
    ensure(worst_exp <= 1e-6, || format!("exp_approx rel err {worst_exp:e}"))?;

    let mut worst = [0.0f64; 2];
    for i in 0..=n {
        let x = (2.0f64).powf(-20.0 + 40.0 * i as f64 / n as f64) as f32;
        let want = 1.0 / (x as f64).sqrt();
        for (k, iters) in [1u32, 2].into_iter().enumerate() {
            let got = inv_sqrt_fast(x, iters).unwrap() as f64;
            worst[k] = worst[k].max((got - want).abs() / want);
        }
    }
    ensure(worst[0] <= 2e-3, || format!("inv_sqrt_fast 1 iter rel err {:e}", worst[0]))?;
    ensure(worst[1] <= 5e-6, || format!("inv_sqrt_fast 2 iters rel err {:e}", worst[1]))?;

    let mut worst_kernel = 0.0f64;
    for k in &KERNELS {
        let p = compile_source(k.source, k.default_shape).map_err(|e| e.to_string())?;
        let inputs = random_inputs(&p, 11);
        let exact = interpret(&p, &inputs).map_err(|e| e.to_string())?;
        let opts = PassOptions { math: ApproxPolicy::approx(), ..PassOptions::default() };
        let spec = PipelineSpec { passes: vec![PassKind::MathApprox], options: opts, verify: VerifyMode::Off };
        let r = run_program(p, &spec, Some(&inputs)).map_err(|e| e.to_string())?;
        let approx = r.outputs.unwrap();
        let c = compare_outputs(&exact, &approx, CompareMode::RelTol(1e-4)).map_err(|e| e.to_string())?;
        ensure(c.passed(), || format!("{}: {c}", k.name))?;
        worst_kernel = worst_kernel.max(c.worst.map_or(0.0, |w| w.rel));
        if k.name == "softmax" {
            let out = &approx["out"];
            let cols = *out.shape.last().unwrap();
            for (r, row) in out.data.chunks(cols).enumerate() {
                let s: f64 = row.iter().map(|&v| v as f64).sum();
                ensure((s - 1.0).abs() <= 1e-5, || format!("approx softmax row {r} sums to {s}"))?;
            }
        }
    }
    Ok(format!(
        "exp {worst_exp:.2e}, rsqrt {:.2e}/{:.2e}, kernels vs exact {worst_kernel:.2e}",
        worst[0], worst[1]
    ))
}

fn property_fuzzing() -> Outcome {
    let mut threaded_runs = 0;
    for seed in 0..100 {
        let spec = RandomProgramSpec::from_seed(seed);
        let p = gen_random_program(&spec);
        let fail = |m: String| format!("seed {seed}: {m}");
        let v = tcmc_core::ir::verify(&p, None);
        ensure(v.is_ok(), || fail(v.to_string()))?;

        let f = fuse_elementwise(&p);
        let inputs = random_inputs(&p, seed);
        let (a, b) = (interpret(&p, &inputs).map_err(|e| fail(e.to_string()))?, interpret(&f, &inputs).map_err(|e| fail(e.to_string()))?);
        let c = compare_outputs(&a, &b, CompareMode::BitExact).map_err(|e| fail(e.to_string()))?;
        ensure(c.passed(), || fail(format!("fuse: {c}")))?;

        let mut opts = PassOptions { tcm_bytes: 16 << 10, ..PassOptions::default() };
        opts.threading.threshold = 64;
        let full = PipelineSpec { passes: PassKind::FULL.to_vec(), options: opts, verify: VerifyMode::Off };
        let r = run_program(p.clone(), &full, None).map_err(|e| fail(e.to_string()))?;
        let tiled = &r.stages[2].program;
        for prog in [tiled, r.final_program()] {
            for cov in output_coverage(prog).map_err(|e| fail(e.to_string()))? {
                ensure(cov.exact(), || fail(format!("{} at stage {}: {cov:?}", cov.tensor, prog.stage)))?;
            }
        }

        let fin = r.final_program();
        for s in 0..10 {
            let inputs = random_inputs(&p, seed * 1000 + s);
            let seq = interpret(fin, &inputs).map_err(|e| fail(e.to_string()))?;
            let thr = interpret_with(fin, &inputs, InterpOptions { threaded: true, trace: false })
                .map_err(|e| fail(e.to_string()))?
                .outputs;
            let c = compare_outputs(&seq, &thr, CompareMode::BitExact).map_err(|e| fail(e.to_string()))?;
            ensure(c.passed(), || fail(format!("threaded vs sequential: {c}")))?;
            threaded_runs += 1;
        }
    }
    Ok(format!("100 programs: verify, fuse, coverage ok; {threaded_runs} threaded runs equal"))
}

fn oracle_agreement() -> Outcome {
    let mut worst = 0.0f64;
    for k in &KERNELS {
        for shape in SHAPES {
            let p = compile_source(k.source, shape).map_err(|e| e.to_string())?;
            let inputs = random_inputs(&p, 2);
            let spec = PipelineSpec { verify: VerifyMode::BitExact, ..PipelineSpec::default() };
            let r = run_program(p, &spec, Some(&inputs)).map_err(|e| e.to_string())?;
            let want = oracle_eval(k.name, &inputs).map_err(|e| e.to_string())?;
            let c = compare_outputs(&want, r.outputs.as_ref().unwrap(), CompareMode::RelTol(1e-6)).map_err(|e| e.to_string())?;
            ensure(c.passed(), || format!("{} {shape:?}: {c}", k.name))?;
            worst = worst.max(c.worst.map_or(0.0, |w| w.rel));
        }
    }
    Ok(format!("worst relative error {worst:.2e}"))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("1 semantic preservation", semantic_preservation),
        ("2 ideal-overlap law", ideal_overlap_law),
        ("3 MT crossover", mt_crossover),
        ("4 pass-ladder trends", pass_ladder_trends),
        ("5 fusion structure", fusion_structure),
        ("6 double-buffer structure", double_buffer_structure),
        ("7 math accuracy", math_accuracy),
        ("8 property fuzzing", property_fuzzing),
        ("9 oracle agreement", oracle_agreement),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        match check() {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    println!("{} of 9 criteria passed", 9 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
