//! Committed fixtures: oracle outputs for every shipped kernel and golden IR
//! dumps of the full GELU pipeline. Regenerate with
//! `cargo test -p tcmc-core --test fixtures -- --ignored`.

use std::fs;
use std::path::PathBuf;

use tcmc_core::driver::{random_inputs, run_pipeline, PassOptions, PipelineSpec, VerifyMode};
use tcmc_core::frontend::{compile_source, parse_kernel, RowShape};
use tcmc_core::interp::{compare_outputs, CompareMode};
use tcmc_core::oracles::oracle_eval;
use tcmc_core::shipped::KERNELS;
use tcmc_core::tensor_io::{read_tensor, read_tensors, write_tensors};

const INPUT_SEED: u64 = 2024;

fn root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn golden_spec() -> (RowShape, PipelineSpec) {
    let mut spec = PipelineSpec { verify: VerifyMode::BitExact, ..PipelineSpec::default() };
    spec.options = PassOptions { tile_sizes: Some(vec![1024]), ..spec.options };
    spec.options.threading.threshold = 256;
    (RowShape::one_d(4096), spec)
}

#[test]
#[ignore]
fn regenerate() {
    for k in &KERNELS {
        let dir = root().join("oracle").join(k.name);
        let p = compile_source(k.source, k.default_shape).unwrap();
        let inputs = random_inputs(&p, INPUT_SEED);
        write_tensors(&dir, &inputs).unwrap();
        write_tensors(&dir.join("expected"), &oracle_eval(k.name, &inputs).unwrap()).unwrap();
    }
    let (shape, spec) = golden_spec();
    let r = run_pipeline(tcmc_core::shipped::get("gelu").unwrap().source, shape, &spec, None).unwrap();
    let dir = root().join("golden/gelu_4096");
    fs::create_dir_all(&dir).unwrap();
    for s in &r.stages {
        fs::write(dir.join(&s.dump_name), &s.dump).unwrap();
    }
}

#[test]
fn oracle_fixtures_are_current_and_pipeline_agrees() {
    for k in &KERNELS {
        let dir = root().join("oracle").join(k.name);
        let ast = parse_kernel(k.source).unwrap();
        let names: Vec<&str> = ast.inputs.iter().map(|p| p.name.as_str()).collect();
        let inputs = read_tensors(&dir, &names).unwrap();
        let expected = read_tensors(&dir.join("expected"), &["out"]).unwrap();

        let fresh = oracle_eval(k.name, &inputs).unwrap();
        let frozen = compare_outputs(&expected, &fresh, CompareMode::BitExact).unwrap();
        assert!(frozen.passed(), "{}: oracle drifted from fixture: {frozen}", k.name);

        let spec = PipelineSpec { verify: VerifyMode::BitExact, ..PipelineSpec::default() };
        let r = run_pipeline(k.source, k.default_shape, &spec, Some(&inputs)).unwrap();
        let c = compare_outputs(&expected, r.outputs.as_ref().unwrap(), CompareMode::RelTol(1e-6)).unwrap();
        assert!(c.passed(), "{}: {c}", k.name);
    }
}

#[test]
fn oracle_fixture_shapes_match_kernels() {
    for k in &KERNELS {
        let out = read_tensor(&root().join("oracle").join(k.name).join("expected"), "out").unwrap();
        assert_eq!(out.shape, k.default_shape.shape_of(tcmc_core::frontend::ValueClass::Row), "{}", k.name);
    }
}

#[test]
fn golden_dumps_match() {
    let (shape, spec) = golden_spec();
    let r = run_pipeline(tcmc_core::shipped::get("gelu").unwrap().source, shape, &spec, None).unwrap();
    let dir = root().join("golden/gelu_4096");
    let mut names: Vec<String> = fs::read_dir(&dir).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert_eq!(names, r.stages.iter().map(|s| s.dump_name.clone()).collect::<Vec<_>>());
    for s in &r.stages {
        let want = fs::read_to_string(dir.join(&s.dump_name)).unwrap();
        assert!(want == s.dump, "{} differs from golden file", s.dump_name);
    }
}

#[test]
fn dumps_are_deterministic() {
    let spec = PipelineSpec { verify: VerifyMode::BitExact, ..PipelineSpec::default() };
    let src = tcmc_core::shipped::get("softmax").unwrap().source;
    let shape = RowShape::two_d(64, 128);
    let a = run_pipeline(src, shape, &spec, None).unwrap();
    let b = run_pipeline(src, shape, &spec, None).unwrap();
    let dumps = |r: &tcmc_core::driver::PipelineResult| r.stages.iter().map(|s| s.dump.clone()).collect::<Vec<_>>();
    assert_eq!(dumps(&a), dumps(&b));
}
