//! Pipeline driver: parse a kernel, apply a dependency-checked pass list,
//! dump every stage and differentially check each one against stage 0.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::frontend::{compile_source, FrontendError, RowShape};
use crate::interp::{compare_outputs, interpret, CompareError, CompareMode, CompareReport, ExecError, NamedTensors, TensorValue};
use crate::ir::{print_ir, verify, KernelProgram, Role};
use crate::mathlib::{expand_math_ops, ApproxPolicy};
use crate::passes::{
    db_dma, db_structural, form_async_threads, form_virtual_threads, fuse_elementwise, tile_generic,
    vectorize_innermost, PassError, ThreadingOptions, TileSpec,
};

pub const DEFAULT_TCM_BYTES: usize = 8 << 20;
pub const DEFAULT_VECTOR_WIDTH: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PassKind {
    Fuse,
    Tile,
    Vectorize,
    Mt,
    Async,
    Db,
    MathApprox,
}

impl PassKind {
    pub const FULL: [PassKind; 6] =
        [PassKind::Fuse, PassKind::Tile, PassKind::Vectorize, PassKind::Mt, PassKind::Async, PassKind::Db];

    pub fn name(self) -> &'static str {
        match self {
            PassKind::Fuse => "fuse",
            PassKind::Tile => "tile",
            PassKind::Vectorize => "vectorize",
            PassKind::Mt => "mt",
            PassKind::Async => "async",
            PassKind::Db => "db",
            PassKind::MathApprox => "math-approx",
        }
    }
}

impl fmt::Display for PassKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PassKind {
    type Err = DriverError;

    fn from_str(s: &str) -> Result<Self, DriverError> {
        [PassKind::MathApprox]
            .into_iter()
            .chain(PassKind::FULL)
            .find(|p| p.name() == s)
            .ok_or_else(|| DriverError::Spec(format!("unknown pass `{s}`")))
    }
}

/// Parses a comma-separated pass list.
pub fn parse_pass_list(s: &str) -> Result<Vec<PassKind>, DriverError> {
    s.split(',').map(str::trim).filter(|p| !p.is_empty()).map(str::parse).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum VerifyMode {
    Off,
    BitExact,
    RelTol(f64),
}

impl FromStr for VerifyMode {
    type Err = DriverError;

    /// `off`, `bitexact`, `reltol` (1e-6) or `reltol:TAU`.
    fn from_str(s: &str) -> Result<Self, DriverError> {
        match s {
            "off" => Ok(VerifyMode::Off),
            "bitexact" => Ok(VerifyMode::BitExact),
            "reltol" => Ok(VerifyMode::RelTol(1e-6)),
            _ => match s.strip_prefix("reltol:").map(str::parse::<f64>) {
                Some(Ok(t)) if t >= 0.0 => Ok(VerifyMode::RelTol(t)),
                _ => Err(DriverError::Spec(format!("bad verify mode `{s}`"))),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PassOptions {
    pub tile_sizes: Option<Vec<usize>>,
    pub interchange: Option<Vec<usize>>,
    pub tcm_bytes: usize,
    pub vector_width: usize,
    pub threading: ThreadingOptions,
    pub db_stage1_only: bool,
    pub math: ApproxPolicy,
}

impl Default for PassOptions {
    fn default() -> Self {
        Self {
            tile_sizes: None,
            interchange: None,
            tcm_bytes: DEFAULT_TCM_BYTES,
            vector_width: DEFAULT_VECTOR_WIDTH,
            threading: ThreadingOptions::default(),
            db_stage1_only: false,
            math: ApproxPolicy::approx(),
        }
    }
}

impl PassOptions {
    pub fn tile_spec(&self) -> TileSpec {
        TileSpec {
            sizes: self.tile_sizes.clone(),
            interchange: self.interchange.clone(),
            ..TileSpec::default_for(self.tcm_bytes)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineSpec {
    pub passes: Vec<PassKind>,
    pub options: PassOptions,
    pub verify: VerifyMode,
}

impl Default for PipelineSpec {
    fn default() -> Self {
        Self::new(PassKind::FULL.to_vec())
    }
}

impl PipelineSpec {
    pub fn new(passes: Vec<PassKind>) -> Self {
        Self { passes, options: PassOptions::default(), verify: VerifyMode::Off }
    }

    pub fn validate(&self) -> Result<(), DriverError> {
        for (i, p) in self.passes.iter().enumerate() {
            if self.passes[..i].contains(p) {
                return Err(DriverError::Spec(format!("pass `{p}` listed twice")));
            }
            let earlier = |q: PassKind| self.passes[..i].contains(&q);
            match p {
                PassKind::Db if !earlier(PassKind::Tile) => return Err(DriverError::Spec("db requires tile".into())),
                PassKind::Async if !earlier(PassKind::Mt) => return Err(DriverError::Spec("async requires mt".into())),
                _ => {}
            }
        }
        if self.options.vector_width < 1 {
            return Err(DriverError::Spec("vector width must be at least 1".into()));
        }
        if self.options.threading.threads < 1 || self.options.threading.threshold < 1 {
            return Err(DriverError::Spec("thread count and mt threshold must be at least 1".into()));
        }
        self.options.math.validate().map_err(|e| DriverError::Spec(e.to_string()))
    }
}

#[derive(Debug, Error)]
pub enum DriverError {
    #[error("invalid pipeline: {0}")]
    Spec(String),
    #[error("{0}")]
    Frontend(#[from] FrontendError),
    #[error("pass {pass}: {source}")]
    Pass { pass: PassKind, source: PassError },
    #[error("verification failed after {stage}: {detail}")]
    Verify { stage: String, detail: String },
    #[error("{0}")]
    Io(String),
}

impl DriverError {
    /// Process exit status for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            DriverError::Spec(_) => 2,
            DriverError::Frontend(_) => 3,
            DriverError::Pass { .. } => 4,
            DriverError::Verify { .. } => 5,
            DriverError::Io(_) => 6,
        }
    }
}

/// One applied stage.
#[derive(Clone, Debug)]
pub struct Stage {
    pub name: String,
    pub program: KernelProgram,
    /// File name `NN_<name>.ir`.
    pub dump_name: String,
    pub dump: String,
    pub check: Option<CompareReport>,
}

#[derive(Clone, Debug)]
pub struct PipelineResult {
    pub stages: Vec<Stage>,
    pub outputs: Option<NamedTensors>,
}

impl PipelineResult {
    pub fn final_program(&self) -> &KernelProgram {
        &self.stages.last().expect("stage 0 always present").program
    }
}

pub fn apply_pass(program: &KernelProgram, pass: PassKind, opts: &PassOptions) -> Result<KernelProgram, PassError> {
    match pass {
        PassKind::Fuse => Ok(fuse_elementwise(program)),
        PassKind::Tile => tile_generic(program, &opts.tile_spec()),
        PassKind::Vectorize => vectorize_innermost(program, opts.vector_width),
        PassKind::Mt => form_virtual_threads(program, &opts.threading),
        PassKind::Async => form_async_threads(program),
        PassKind::Db => {
            let s1 = db_structural(program)?;
            if opts.db_stage1_only || s1.count_ops(|o| o.has(crate::passes::double_buffer::DB_LOOP)) == 0 {
                return Ok(s1);
            }
            db_dma(&s1)
        }
        PassKind::MathApprox => Ok(expand_math_ops(program, &opts.math)?),
    }
}

fn dump_text(stage: &str, program: &KernelProgram) -> String {
    format!("// IR Dump After {stage}\n{}", print_ir(program))
}

/// Seeded inputs uniform in `[-1, 1)` for every kernel input.
pub fn random_inputs(program: &KernelProgram, seed: u64) -> NamedTensors {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    program
        .decls
        .iter()
        .filter(|d| d.role == Role::Input)
        .map(|d| (d.name.clone(), TensorValue::from_fn(d.shape.clone(), |_| rng.gen_range(-1.0f32..1.0))))
        .collect()
}

fn check(stage: &str, base: &NamedTensors, got: Result<NamedTensors, ExecError>, mode: CompareMode) -> Result<CompareReport, DriverError> {
    let got = got.map_err(|e| DriverError::Verify { stage: stage.into(), detail: e.to_string() })?;
    let r = compare_outputs(base, &got, mode)
        .map_err(|e: CompareError| DriverError::Verify { stage: stage.into(), detail: e.to_string() })?;
    if !r.passed() {
        return Err(DriverError::Verify { stage: stage.into(), detail: r.to_string() });
    }
    Ok(r)
}

/// Runs the pipeline on an already lowered program.
pub fn run_program(program: KernelProgram, spec: &PipelineSpec, inputs: Option<&NamedTensors>) -> Result<PipelineResult, DriverError> {
    spec.validate()?;
    let tcm = Some(spec.options.tcm_bytes);
    let mode = match spec.verify {
        VerifyMode::Off => None,
        VerifyMode::BitExact => Some(CompareMode::BitExact),
        VerifyMode::RelTol(t) => Some(CompareMode::RelTol(t)),
    };
    let generated;
    let inputs = match inputs {
        Some(i) => Some(i),
        None if mode.is_some() => {
            generated = random_inputs(&program, 0);
            Some(&generated)
        }
        None => None,
    };
    let base = match inputs {
        Some(i) => Some(interpret(&program, i).map_err(|e| DriverError::Verify { stage: "input".into(), detail: e.to_string() })?),
        None => None,
    };
    let mut stages = vec![Stage {
        name: "input".into(),
        dump_name: "00_input.ir".into(),
        dump: dump_text("input", &program),
        program,
        check: None,
    }];
    for (i, pass) in spec.passes.iter().enumerate() {
        let prev = &stages.last().unwrap().program;
        let next = apply_pass(prev, *pass, &spec.options).map_err(|source| DriverError::Pass { pass: *pass, source })?;
        let report = verify(&next, tcm);
        if !report.is_ok() {
            return Err(DriverError::Verify { stage: pass.name().into(), detail: report.to_string() });
        }
        let check = match (mode, inputs, &base) {
            (Some(m), Some(inp), Some(b)) => Some(check(pass.name(), b, interpret(&next, inp), m)?),
            _ => None,
        };
        stages.push(Stage {
            name: pass.name().into(),
            dump_name: format!("{:02}_{}.ir", i + 1, pass.name()),
            dump: dump_text(pass.name(), &next),
            program: next,
            check,
        });
    }
    let outputs = match inputs {
        Some(i) => {
            let fin = &stages.last().unwrap().program;
            Some(interpret(fin, i).map_err(|e| DriverError::Verify { stage: "output".into(), detail: e.to_string() })?)
        }
        None => None,
    };
    Ok(PipelineResult { stages, outputs })
}

/// Parses and lowers `source` at `shape`, then runs the pipeline.
pub fn run_pipeline(
    source: &str,
    shape: RowShape,
    spec: &PipelineSpec,
    inputs: Option<&NamedTensors>,
) -> Result<PipelineResult, DriverError> {
    spec.validate()?;
    run_program(compile_source(source, shape)?, spec, inputs)
}

/// Writes every stage dump into `dir`, creating it if needed.
pub fn write_dumps(result: &PipelineResult, dir: &Path) -> Result<Vec<PathBuf>, DriverError> {
    fs::create_dir_all(dir).map_err(|e| DriverError::Io(format!("{}: {e}", dir.display())))?;
    result
        .stages
        .iter()
        .map(|s| {
            let path = dir.join(&s.dump_name);
            fs::write(&path, &s.dump).map_err(|e| DriverError::Io(format!("{}: {e}", path.display())))?;
            Ok(path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shipped;

    #[test]
    fn dependency_rules() {
        let err = PipelineSpec::new(vec![PassKind::Db]).validate().unwrap_err();
        assert_eq!(err.to_string(), "invalid pipeline: db requires tile");
        assert_eq!(err.exit_code(), 2);
        assert!(PipelineSpec::new(vec![PassKind::Async, PassKind::Mt]).validate().is_err());
        assert!(PipelineSpec::new(vec![PassKind::Fuse, PassKind::Fuse]).validate().is_err());
        assert!(PipelineSpec::default().validate().is_ok());
    }

    #[test]
    fn pass_list_parsing() {
        assert_eq!(parse_pass_list("fuse, tile,math-approx").unwrap(), [PassKind::Fuse, PassKind::Tile, PassKind::MathApprox]);
        assert!(parse_pass_list("fuse,unroll").is_err());
        assert_eq!("reltol:1e-4".parse::<VerifyMode>().unwrap(), VerifyMode::RelTol(1e-4));
    }

    #[test]
    fn full_gelu_pipeline_has_seven_dumps() {
        let k = shipped::get("gelu").unwrap();
        let spec = PipelineSpec { verify: VerifyMode::BitExact, ..PipelineSpec::default() };
        let r = run_pipeline(k.source, k.default_shape, &spec, None).unwrap();
        let names: Vec<_> = r.stages.iter().map(|s| s.dump_name.as_str()).collect();
        assert_eq!(names, ["00_input.ir", "01_fuse.ir", "02_tile.ir", "03_vectorize.ir", "04_mt.ir", "05_async.ir", "06_db.ir"]);
        assert!(r.stages[1..].iter().all(|s| s.check.as_ref().is_some_and(|c| c.passed())));
    }
}
