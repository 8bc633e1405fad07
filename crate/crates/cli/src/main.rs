use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tcmc_core::driver::{
    parse_pass_list, run_pipeline, write_dumps, DriverError, PassKind, PassOptions, PipelineSpec, VerifyMode,
};
use tcmc_core::frontend::{parse_kernel, RowShape, ValueClass};
use tcmc_core::mathlib::ApproxPolicy;
use tcmc_core::passes::Distribution;
use tcmc_core::perf::{
    memory_fraction_sweep, parse_ladder, pass_sweep, simulate, size_sweep, write_csv, MachineConfig, PerfError,
    SweepAxis, DEFAULT_LADDER, DEFAULT_PASS_SWEEP_SIZE, M_POINTS, SWEEP_SIZES,
};
use tcmc_core::shipped::{self, ShippedKernel};
use tcmc_core::tensor_io;

const EXIT_CODES: &str = "Exit status:
  0  success
  2  invalid pipeline spec or command-line usage
  3  kernel source error (lex, parse or type check)
  4  a pass rejected the program
  5  verification failed (verifier, interpreter fault or output mismatch)
  6  I/O error (missing kernel, config or tensor file)";

#[derive(Parser)]
#[command(name = "tcmc", version, about = "Tensor compiler for scratchpad-memory vector machines", after_help = EXIT_CODES)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the pass pipeline on a kernel, optionally verifying and dumping every stage.
    #[command(after_help = EXIT_CODES)]
    Compile(CompileArgs),
    /// Run cost-model sweeps and write CSV.
    #[command(after_help = EXIT_CODES)]
    Bench(BenchArgs),
    /// Compile a kernel and interpret it on tensors read from a directory.
    #[command(after_help = EXIT_CODES)]
    Run(RunArgs),
}

#[derive(Args)]
struct PipelineArgs {
    /// Comma-separated passes from fuse, tile, vectorize, mt, async, db, math-approx.
    #[arg(long, default_value = "fuse,tile,vectorize,mt,async,db")]
    passes: String,
    /// Row shape: `N` for a 1-D row or `ROWSxCOLS`.
    #[arg(long)]
    shape: Option<String>,
    /// Tile sizes, one per tiled dimension (comma-separated).
    #[arg(long)]
    tile_size: Option<String>,
    #[arg(long, default_value_t = tcmc_core::driver::DEFAULT_VECTOR_WIDTH)]
    vector_width: usize,
    #[arg(long, default_value_t = 4)]
    threads: usize,
    /// `block` or `cyclic:CHUNK`.
    #[arg(long, default_value = "block")]
    dist: String,
    /// Minimum iteration points before a unit is threaded.
    #[arg(long, default_value_t = tcmc_core::passes::threading::DEFAULT_MT_THRESHOLD)]
    mt_threshold: usize,
    /// Append `db` to the pass list if it is missing.
    #[arg(long)]
    double_buffer: bool,
    /// Stop double buffering after the structural stage.
    #[arg(long)]
    db_stage1_only: bool,
    /// `exact` or `approx`; `approx` appends math-approx to the pass list
    /// (listing math-approx in --passes has the same effect).
    #[arg(long, default_value = "exact")]
    math: String,
    /// Scratchpad capacity in bytes used for tiling and the verifier.
    #[arg(long, default_value_t = tcmc_core::driver::DEFAULT_TCM_BYTES)]
    tcm_bytes: usize,
    /// `off`, `bitexact`, `reltol` or `reltol:TAU`.
    #[arg(long, default_value = "off")]
    verify: String,
}

#[derive(Args)]
struct CompileArgs {
    file: PathBuf,
    #[command(flatten)]
    pipeline: PipelineArgs,
    /// Write `NN_<pass>.ir` after every stage into DIR.
    #[arg(long, value_name = "DIR")]
    dump_after_all: Option<PathBuf>,
    /// Machine config; prints a timing report of the final program.
    #[arg(long, value_name = "CFG")]
    machine: Option<PathBuf>,
    /// Print the final IR to stdout.
    #[arg(long)]
    emit_ir: bool,
}

#[derive(Args)]
struct BenchArgs {
    /// Shipped kernel names or `.tk` files. None gives a header-only CSV
    /// (except for `--sweep m`, which uses its own synthetic kernel).
    kernels: Vec<String>,
    #[arg(long, value_name = "CFG")]
    machine: Option<PathBuf>,
    /// `size`, `m` or `passes`.
    #[arg(long, default_value = "passes")]
    sweep: String,
    /// Rungs from scalar, vec, vec+db, vec+mt, vec+mt+db. Defaults to
    /// `vec+db,vec+mt+db` for size sweeps and the four-rung ladder otherwise.
    #[arg(long)]
    ladder: Option<String>,
    /// Element count of a pass sweep.
    #[arg(long, default_value_t = DEFAULT_PASS_SWEEP_SIZE)]
    size: usize,
    /// Element counts of a size sweep (comma-separated); defaults to 8K..1M.
    #[arg(long)]
    sizes: Option<String>,
    /// Row length of file kernels with 2-D rows; omitted means 1-D.
    #[arg(long)]
    cols: Option<usize>,
    /// Output file; stdout when omitted.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    file: PathBuf,
    #[command(flatten)]
    pipeline: PipelineArgs,
    /// Directory holding `<input>.f32` and `<input>.f32.shape` for every kernel input.
    #[arg(long, value_name = "DIR")]
    inputs: PathBuf,
    /// Directory the outputs are written to.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Debug)]
enum CliError {
    Driver(DriverError),
    Perf(PerfError),
}

impl From<DriverError> for CliError {
    fn from(e: DriverError) -> Self {
        CliError::Driver(e)
    }
}

impl From<PerfError> for CliError {
    fn from(e: PerfError) -> Self {
        match e {
            PerfError::Pipeline(d) => CliError::Driver(d),
            e => CliError::Perf(e),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Driver(d) => d.exit_code() as u8,
            CliError::Perf(PerfError::Sweep(_) | PerfError::Fraction(_) | PerfError::Config(_)) => 2,
            CliError::Perf(_) => 5,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Driver(e) => e.fmt(f),
            CliError::Perf(e) => e.fmt(f),
        }
    }
}

fn spec_err(msg: impl Into<String>) -> CliError {
    CliError::Driver(DriverError::Spec(msg.into()))
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Driver(DriverError::Io(format!("{}: {e}", path.display())))
}

fn parse_shape(s: &str) -> Result<RowShape, CliError> {
    let num = |t: &str| t.trim().parse::<usize>().ok().filter(|n| *n > 0);
    let shape = match s.split_once('x') {
        Some((r, c)) => num(r).zip(num(c)).map(|(r, c)| RowShape::two_d(r, c)),
        None => num(s).map(RowShape::one_d),
    };
    shape.ok_or_else(|| spec_err(format!("bad shape `{s}` (expected N or ROWSxCOLS)")))
}

fn parse_usize_list(s: &str, what: &str) -> Result<Vec<usize>, CliError> {
    s.split(',')
        .map(|t| t.trim().parse::<usize>().map_err(|_| spec_err(format!("bad {what} `{t}`"))))
        .collect()
}

fn pipeline_spec(a: &PipelineArgs) -> Result<PipelineSpec, CliError> {
    let mut passes = parse_pass_list(&a.passes)?;
    if a.double_buffer && !passes.contains(&PassKind::Db) {
        passes.push(PassKind::Db);
    }
    match a.math.as_str() {
        "exact" => {}
        "approx" if !passes.contains(&PassKind::MathApprox) => passes.push(PassKind::MathApprox),
        "approx" => {}
        m => return Err(spec_err(format!("bad math mode `{m}` (expected exact or approx)"))),
    }
    let mut options = PassOptions {
        tile_sizes: a.tile_size.as_deref().map(|s| parse_usize_list(s, "tile size")).transpose()?,
        tcm_bytes: a.tcm_bytes,
        vector_width: a.vector_width,
        db_stage1_only: a.db_stage1_only,
        math: ApproxPolicy::approx(),
        ..PassOptions::default()
    };
    options.threading.threads = a.threads;
    options.threading.threshold = a.mt_threshold;
    options.threading.dist = a.dist.parse::<Distribution>().map_err(|e| spec_err(e.to_string()))?;
    let spec = PipelineSpec { passes, options, verify: a.verify.parse::<VerifyMode>()? };
    spec.validate()?;
    Ok(spec)
}

fn read_source(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| io_err(path, e))
}

fn load_machine(path: Option<&Path>) -> Result<MachineConfig, CliError> {
    match path {
        None => Ok(MachineConfig::default()),
        Some(p) if !p.exists() => Err(io_err(p, "no such file")),
        Some(p) => Ok(MachineConfig::load(p)?),
    }
}

fn default_shape(a: &PipelineArgs) -> Result<RowShape, CliError> {
    a.shape.as_deref().map_or(Ok(RowShape::one_d(1024)), parse_shape)
}

fn compile(a: CompileArgs) -> Result<(), CliError> {
    let source = read_source(&a.file)?;
    let spec = pipeline_spec(&a.pipeline)?;
    let machine = a.machine.as_deref().map(|p| load_machine(Some(p))).transpose()?;
    let result = run_pipeline(&source, default_shape(&a.pipeline)?, &spec, None)?;
    if let Some(dir) = &a.dump_after_all {
        write_dumps(&result, dir)?;
    }
    let mut out = std::io::stdout().lock();
    for s in &result.stages {
        let ops = s.program.count_ops(|_| true);
        let check = s.check.as_ref().map_or(String::new(), |c| format!("  {c}"));
        let _ = writeln!(out, "{:<16} {ops:>5} ops{check}", s.dump_name.trim_end_matches(".ir"));
    }
    if let Some(cfg) = machine {
        let report = simulate(result.final_program(), &cfg)?;
        let _ = writeln!(out, "{report}");
    }
    if a.emit_ir {
        let _ = write!(out, "{}", result.stages.last().unwrap().dump);
    }
    Ok(())
}

fn run(a: RunArgs) -> Result<(), CliError> {
    let source = read_source(&a.file)?;
    let spec = pipeline_spec(&a.pipeline)?;
    let ast = parse_kernel(&source).map_err(DriverError::from)?;
    let names: Vec<&str> = ast.inputs.iter().map(|p| p.name.as_str()).collect();
    let inputs = tensor_io::read_tensors(&a.inputs, &names).map_err(|e| DriverError::Io(e.to_string()))?;
    // The shape comes from the first row input unless given explicitly.
    let shape = match &a.pipeline.shape {
        Some(s) => parse_shape(s)?,
        None => {
            let row = ast.inputs.iter().find(|p| p.class == ValueClass::Row);
            match row.map(|p| inputs[&p.name].shape.as_slice()) {
                Some([c]) => RowShape::one_d(*c),
                Some([r, c]) => RowShape::two_d(*r, *c),
                _ => return Err(spec_err("cannot infer the row shape; pass --shape")),
            }
        }
    };
    let result = run_pipeline(&source, shape, &spec, Some(&inputs))?;
    let outputs = result.outputs.expect("inputs were given");
    tensor_io::write_tensors(&a.out, &outputs).map_err(|e| DriverError::Io(e.to_string()))?;
    for s in result.stages.iter().filter(|s| s.check.is_some()) {
        println!("{:<16} {}", s.dump_name.trim_end_matches(".ir"), s.check.as_ref().unwrap());
    }
    Ok(())
}

/// A shipped kernel by name, or a kernel file. File kernels are 1-D unless
/// `cols` is given.
fn bench_kernel(arg: &str, cols: Option<usize>) -> Result<ShippedKernel, CliError> {
    if let Some(k) = shipped::get(arg) {
        return Ok(ShippedKernel { name: k.name, source: k.source, default_shape: k.default_shape });
    }
    let path = Path::new(arg);
    if !path.exists() {
        return Err(io_err(path, "no such kernel file or shipped kernel"));
    }
    let source = read_source(path)?;
    let ast = parse_kernel(&source).map_err(DriverError::from)?;
    let default_shape = match cols {
        Some(c) => RowShape::two_d(1, c),
        None => RowShape::one_d(1),
    };
    // Sweep rows borrow these for the life of the process.
    Ok(ShippedKernel { name: Box::leak(ast.name.into_boxed_str()), source: Box::leak(source.into_boxed_str()), default_shape })
}

fn bench(a: BenchArgs) -> Result<(), CliError> {
    let cfg = load_machine(a.machine.as_deref())?;
    let axis: SweepAxis = a.sweep.parse()?;
    let kernels = a.kernels.iter().map(|k| bench_kernel(k, a.cols)).collect::<Result<Vec<_>, _>>()?;
    let mut rows = Vec::new();
    match axis {
        SweepAxis::MemoryFraction => rows = memory_fraction_sweep(&M_POINTS)?,
        SweepAxis::Size => {
            let ladder = parse_ladder(a.ladder.as_deref().unwrap_or("vec+db,vec+mt+db"))?;
            let sizes = match &a.sizes {
                Some(s) => parse_usize_list(s, "size")?,
                None => SWEEP_SIZES.to_vec(),
            };
            for k in &kernels {
                rows.extend(size_sweep(k, &sizes, &ladder, &cfg)?);
            }
        }
        SweepAxis::Passes => {
            let ladder = parse_ladder(a.ladder.as_deref().unwrap_or(DEFAULT_LADDER))?;
            for k in &kernels {
                rows.extend(pass_sweep(k, a.size, &ladder, &cfg)?);
            }
        }
    }
    let mut buf = Vec::new();
    write_csv(&rows, &mut buf).expect("writing to memory");
    match &a.csv {
        Some(p) => fs::write(p, buf).map_err(|e| io_err(p, e)),
        None => std::io::stdout().write_all(&buf).map_err(|e| io_err(Path::new("<stdout>"), e)),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let r = match cli.cmd {
        Cmd::Compile(a) => compile(a),
        Cmd::Bench(a) => bench(a),
        Cmd::Run(a) => run(a),
    };
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("tcmc: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
