use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn repo() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn tcmc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tcmc")).args(args).current_dir(repo()).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn kernel(name: &str) -> String {
    repo().join("kernels").join(format!("{name}.tk")).display().to_string()
}

#[test]
fn exit_codes_match_fixture_table() {
    let k = repo().join("kernels").display().to_string();
    let f = repo().join("fixtures/cli").display().to_string();
    let table = fs::read_to_string(repo().join("fixtures/cli/exit_codes.txt")).unwrap();
    let mut failures = Vec::new();
    for line in table.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#')) {
        let line = line.replace("{k}", &k).replace("{f}", &f);
        let mut words = line.split_whitespace();
        let want: i32 = words.next().unwrap().parse().unwrap();
        let args: Vec<&str> = words.collect();
        let got = tcmc(&args).status.code();
        if got != Some(want) {
            failures.push(format!("{args:?}: want {want}, got {got:?}"));
        }
    }
    assert!(failures.is_empty(), "{}", failures.join("\n"));
}

fn dump_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().into_string().unwrap(), fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn dump_after_all_is_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        let o = tcmc(&["compile", &kernel("gelu"), "--dump-after-all", d.path().to_str().unwrap()]);
        assert!(o.status.success());
    }
    let (da, db) = (dump_files(a.path()), dump_files(b.path()));
    let names: Vec<&str> = da.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names, ["00_input.ir", "01_fuse.ir", "02_tile.ir", "03_vectorize.ir", "04_mt.ir", "05_async.ir", "06_db.ir"]);
    assert_eq!(da, db);
}

#[test]
fn golden_dumps_reproduce_from_cli() {
    let d = tempfile::tempdir().unwrap();
    let o = tcmc(&[
        "compile", &kernel("gelu"), "--shape", "4096", "--tile-size", "1024", "--mt-threshold", "256",
        "--dump-after-all", d.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(dump_files(d.path()), dump_files(&repo().join("fixtures/golden/gelu_4096")));
}

#[test]
fn machine_report_printed() {
    let o = tcmc(&["compile", &kernel("gelu"), "--machine", repo().join("configs/default.machine").to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let s = stdout(&o);
    assert!(s.contains("total") && s.contains("overlapped"), "{s}");
}

fn csv_rows(s: &str) -> Vec<Vec<String>> {
    s.lines().skip(1).map(|l| l.split(',').map(str::to_string).collect()).collect()
}

const HEADER: &str = "kernel,size,passes,cycles,compute,transfer,overhead,m,speedup";

#[test]
fn bench_without_kernels_is_header_only() {
    let o = tcmc(&["bench"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).trim_end(), HEADER);
}

#[test]
fn pass_ladder_cycles_do_not_increase() {
    let o = tcmc(&["bench", "vecadd2d"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let s = stdout(&o);
    assert_eq!(s.lines().next(), Some(HEADER));
    let rows = csv_rows(&s);
    assert_eq!(rows.len(), 4);
    let cycles: Vec<f64> = rows.iter().map(|r| r[3].parse().unwrap()).collect();
    assert!(cycles.windows(2).all(|w| w[1] <= w[0]), "{cycles:?}");
}

#[test]
fn size_sweep_writes_csv_file() {
    let d = tempfile::tempdir().unwrap();
    let csv = d.path().join("gelu.csv");
    let o = tcmc(&["bench", "gelu", "--sweep", "size", "--csv", csv.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = csv_rows(&fs::read_to_string(&csv).unwrap());
    assert_eq!(rows.len(), 16);
    assert!(rows.iter().all(|r| r.len() == 9 && r[0] == "gelu"));
}

#[test]
fn memory_fraction_sweep_has_its_own_kernel() {
    let o = tcmc(&["bench", "--sweep", "m"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = csv_rows(&stdout(&o));
    assert!(!rows.is_empty());
    let peak = rows.iter().map(|r| r[8].parse::<f64>().unwrap()).fold(0.0, f64::max);
    assert!((peak - 2.0).abs() < 1e-6, "{peak}");
}

#[test]
fn run_reproduces_oracle_fixture() {
    let fx = repo().join("fixtures/oracle/gelu");
    let out = tempfile::tempdir().unwrap();
    let o = tcmc(&[
        "run", &kernel("gelu"), "--inputs", fx.to_str().unwrap(), "--out", out.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let read = |dir: &Path| {
        let shape = fs::read_to_string(dir.join("out.f32.shape")).unwrap();
        let data: Vec<f32> = fs::read(dir.join("out.f32")).unwrap().chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        (shape, data)
    };
    let (gs, got) = read(out.path());
    let (ws, want) = read(&fx.join("expected"));
    assert_eq!(gs, ws);
    for (g, w) in got.iter().zip(&want) {
        assert!((g - w).abs() <= 1e-6 * w.abs().max(1e-3), "{g} vs {w}");
    }
}

#[test]
fn run_with_missing_inputs_is_io_error() {
    let d = tempfile::tempdir().unwrap();
    let o = tcmc(&["run", &kernel("gelu"), "--inputs", d.path().to_str().unwrap(), "--out", d.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(6));
}
