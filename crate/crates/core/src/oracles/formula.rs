//! Textbook formulas of the shipped kernels in double precision.

use crate::interp::{NamedTensors, TensorValue};

use super::OracleError;

const RMS_EPSILON: f64 = 1e-6;

fn input<'a>(inputs: &'a NamedTensors, name: &str) -> Result<&'a TensorValue, OracleError> {
    inputs.get(name).ok_or_else(|| OracleError::MissingInput(name.into()))
}

/// Splits a row tensor into `(rows, cols)`.
fn rows_cols(t: &TensorValue) -> (usize, usize) {
    let cols = *t.shape.last().unwrap_or(&1);
    (t.data.len() / cols.max(1), cols)
}

fn map(x: &TensorValue, f: impl Fn(f64) -> f64) -> TensorValue {
    TensorValue { shape: x.shape.clone(), data: x.data.iter().map(|&v| f(v as f64) as f32).collect() }
}

fn per_row(x: &TensorValue, f: impl Fn(&[f64]) -> Vec<f64>) -> TensorValue {
    let (_, cols) = rows_cols(x);
    let mut data = Vec::with_capacity(x.data.len());
    for row in x.data.chunks(cols.max(1)) {
        let r: Vec<f64> = row.iter().map(|&v| v as f64).collect();
        data.extend(f(&r).into_iter().map(|v| v as f32));
    }
    TensorValue { shape: x.shape.clone(), data }
}

pub fn softmax_row(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub fn rmsnorm_row(x: &[f64], g: &[f64], eps: f64) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let rms = (ms + eps).sqrt();
    x.iter().zip(g).map(|(v, g)| v / rms * g).collect()
}

/// Evaluates shipped kernel `kernel` on `inputs` in f64 and rounds the result
/// to f32. The output is named `out` like in the kernel sources.
pub fn oracle_eval(kernel: &str, inputs: &NamedTensors) -> Result<NamedTensors, OracleError> {
    let out = match kernel {
        "softmax" => per_row(input(inputs, "x")?, softmax_row),
        "gelu" => map(input(inputs, "x")?, gelu),
        "silu" => map(input(inputs, "x")?, silu),
        "expseries" => map(input(inputs, "x")?, f64::exp),
        "rmsnorm" => {
            let g: Vec<f64> = input(inputs, "g")?.data.iter().map(|&v| v as f64).collect();
            let x = input(inputs, "x")?;
            if rows_cols(x).1 != g.len() {
                return Err(OracleError::Shape(format!("gain has {} elements, rows have {}", g.len(), rows_cols(x).1)));
            }
            per_row(x, |r| rmsnorm_row(r, &g, RMS_EPSILON))
        }
        "vecadd2d" => {
            let (a, b) = (input(inputs, "a")?, input(inputs, "b")?);
            if a.shape != b.shape {
                return Err(OracleError::Shape(format!("{:?} vs {:?}", a.shape, b.shape)));
            }
            let data = a.data.iter().zip(&b.data).map(|(&x, &y)| (x as f64 + y as f64) as f32).collect();
            TensorValue { shape: a.shape.clone(), data }
        }
        _ => return Err(OracleError::UnknownKernel(kernel.into())),
    };
    Ok([("out".to_string(), out)].into_iter().collect())
}
