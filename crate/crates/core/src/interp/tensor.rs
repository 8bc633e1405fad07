use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

/// Dense row-major f32 tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorValue {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

pub type NamedTensors = BTreeMap<String, TensorValue>;

impl TensorValue {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "data length must match shape {shape:?}");
        Self { shape, data }
    }

    pub fn filled(shape: Vec<usize>, v: f32) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![v; n] }
    }

    pub fn from_fn(shape: Vec<usize>, f: impl FnMut(usize) -> f32) -> Self {
        let n = shape.iter().product();
        Self { shape, data: (0..n).map(f).collect() }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Debug, Error)]
pub enum TensorIoError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> TensorIoError + '_ {
    move |source| TensorIoError::Io { path: path.to_path_buf(), source }
}

fn format_err(path: &Path, message: impl Into<String>) -> TensorIoError {
    TensorIoError::Format { path: path.to_path_buf(), message: message.into() }
}

fn shape_path(bin: &Path) -> PathBuf {
    let mut s = bin.as_os_str().to_owned();
    s.push(".shape");
    PathBuf::from(s)
}

/// Writes `path` (raw little-endian f32) and `path.shape` (extents separated by spaces).
pub fn write_tensor_bin(path: &Path, t: &TensorValue) -> Result<(), TensorIoError> {
    let bytes: Vec<u8> = t.data.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(io_err(path))?;
    let shape: Vec<String> = t.shape.iter().map(usize::to_string).collect();
    let sp = shape_path(path);
    fs::write(&sp, format!("{}\n", shape.join(" "))).map_err(io_err(&sp))
}

pub fn read_tensor_bin(path: &Path) -> Result<TensorValue, TensorIoError> {
    let sp = shape_path(path);
    let shape_text = fs::read_to_string(&sp).map_err(io_err(&sp))?;
    let shape = shape_text
        .split_whitespace()
        .map(|s| s.parse::<usize>().map_err(|_| format_err(&sp, format!("bad extent `{s}`"))))
        .collect::<Result<Vec<_>, _>>()?;
    if shape.is_empty() || shape.contains(&0) {
        return Err(format_err(&sp, "shape must list positive extents"));
    }
    let bytes = fs::read(path).map_err(io_err(path))?;
    let n: usize = shape.iter().product();
    if bytes.len() != n * 4 {
        return Err(format_err(path, format!("expected {} bytes for shape {shape:?}, found {}", n * 4, bytes.len())));
    }
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Ok(TensorValue { shape, data })
}

/// Parses a small CSV fixture: one line per row, comma-separated values.
/// A single line yields a 1-D tensor.
pub fn parse_tensor_csv(text: &str) -> Result<TensorValue, String> {
    let rows: Vec<Vec<f32>> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            l.split(',')
                .map(|v| v.trim().parse::<f32>().map_err(|_| format!("bad value `{}`", v.trim())))
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<_, _>>()?;
    let Some(cols) = rows.first().map(Vec::len) else {
        return Err("empty tensor".into());
    };
    if rows.iter().any(|r| r.len() != cols) {
        return Err("ragged rows".into());
    }
    let shape = if rows.len() == 1 { vec![cols] } else { vec![rows.len(), cols] };
    Ok(TensorValue { shape, data: rows.concat() })
}

pub fn read_tensor_csv(path: &Path) -> Result<TensorValue, TensorIoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_tensor_csv(&text).map_err(|m| format_err(path, m))
}

/// Reads by extension: `.csv` or raw binary with a `.shape` sidecar.
pub fn read_tensor(path: &Path) -> Result<TensorValue, TensorIoError> {
    if path.extension().is_some_and(|e| e == "csv") {
        read_tensor_csv(path)
    } else {
        read_tensor_bin(path)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CompareMode {
    BitExact,
    RelTol(f64),
}

impl fmt::Display for CompareMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CompareMode::BitExact => f.write_str("bitexact"),
            CompareMode::RelTol(t) => write!(f, "reltol({t:e})"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Offender {
    pub name: String,
    pub index: usize,
    pub a: f32,
    pub b: f32,
    /// |a-b| / max(|a|,|b|,1e-30); infinite when exactly one side is NaN.
    pub rel: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompareReport {
    pub mode: CompareMode,
    pub compared: usize,
    pub mismatches: usize,
    pub worst: Option<Offender>,
}

impl CompareReport {
    pub fn passed(&self) -> bool {
        self.mismatches == 0
    }
}

impl fmt::Display for CompareReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: {} of {} elements differ",
            self.mode, self.mismatches, self.compared
        )?;
        if let Some(w) = &self.worst {
            write!(f, "; worst {}[{}]: {:e} vs {:e} (rel {:.3e})", w.name, w.index, w.a, w.b, w.rel)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum CompareError {
    #[error("tensor `{0}` missing on one side")]
    MissingTensor(String),
    #[error("tensor `{name}` shape {a:?} vs {b:?}")]
    ShapeMismatch { name: String, a: Vec<usize>, b: Vec<usize> },
}

fn rel_err(a: f32, b: f32) -> f64 {
    if a.to_bits() == b.to_bits() || a == b {
        return 0.0;
    }
    if a.is_nan() || b.is_nan() {
        return f64::INFINITY;
    }
    let (a, b) = (a as f64, b as f64);
    if a.is_infinite() || b.is_infinite() {
        return f64::INFINITY;
    }
    (a - b).abs() / a.abs().max(b.abs()).max(1e-30)
}

/// Compares two sets of named tensors elementwise.
pub fn compare_outputs(a: &NamedTensors, b: &NamedTensors, mode: CompareMode) -> Result<CompareReport, CompareError> {
    for name in a.keys().chain(b.keys()) {
        if !a.contains_key(name) || !b.contains_key(name) {
            return Err(CompareError::MissingTensor(name.clone()));
        }
    }
    let mut report = CompareReport { mode, compared: 0, mismatches: 0, worst: None };
    for (name, ta) in a {
        let tb = &b[name];
        if ta.shape != tb.shape {
            return Err(CompareError::ShapeMismatch { name: name.clone(), a: ta.shape.clone(), b: tb.shape.clone() });
        }
        for (i, (&x, &y)) in ta.data.iter().zip(&tb.data).enumerate() {
            report.compared += 1;
            let rel = rel_err(x, y);
            let bad = match mode {
                CompareMode::BitExact => x.to_bits() != y.to_bits(),
                CompareMode::RelTol(tau) => !(rel <= tau),
            };
            if bad {
                report.mismatches += 1;
            }
            let worse = match &report.worst {
                None => bad || rel > 0.0,
                Some(w) => rel > w.rel,
            };
            if worse {
                report.worst = Some(Offender { name: name.clone(), index: i, a: x, b: y, rel });
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(name: &str, data: Vec<f32>) -> NamedTensors {
        let n = data.len();
        [(name.to_string(), TensorValue::new(vec![n], data))].into_iter().collect()
    }

    #[test]
    fn identical_bitexact_passes() {
        let a = one("y", vec![1.0, -2.5, 0.0]);
        assert!(compare_outputs(&a, &a.clone(), CompareMode::BitExact).unwrap().passed());
    }

    #[test]
    fn reltol_reports_worst_offender() {
        let r = compare_outputs(&one("y", vec![1.0]), &one("y", vec![1.1]), CompareMode::RelTol(1e-6)).unwrap();
        assert!(!r.passed());
        assert_eq!(r.worst.unwrap().index, 0);
    }

    #[test]
    fn bitexact_distinguishes_signed_zero() {
        let r = compare_outputs(&one("y", vec![0.0]), &one("y", vec![-0.0]), CompareMode::BitExact).unwrap();
        assert!(!r.passed());
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = one("y", vec![1.0, 2.0]);
        let b: NamedTensors = [("y".into(), TensorValue::new(vec![2, 1], vec![1.0, 2.0]))].into_iter().collect();
        assert!(matches!(compare_outputs(&a, &b, CompareMode::BitExact), Err(CompareError::ShapeMismatch { .. })));
    }

    #[test]
    fn csv_shapes() {
        assert_eq!(parse_tensor_csv("1, 2, 3\n").unwrap().shape, [3]);
        assert_eq!(parse_tensor_csv("1,2\n3,4\n").unwrap().shape, [2, 2]);
        assert!(parse_tensor_csv("1,2\n3\n").is_err());
    }
}
