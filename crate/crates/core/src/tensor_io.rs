//! Named tensors in a directory: tensor `x` lives in `x.f32` with its shape
//! in `x.f32.shape`, in the format of [`write_tensor_bin`].

use std::fs;
use std::path::{Path, PathBuf};

use crate::interp::{read_tensor_bin, write_tensor_bin, NamedTensors, TensorIoError, TensorValue};

pub fn tensor_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.f32"))
}

pub fn read_tensor(dir: &Path, name: &str) -> Result<TensorValue, TensorIoError> {
    read_tensor_bin(&tensor_path(dir, name))
}

pub fn write_tensor(dir: &Path, name: &str, t: &TensorValue) -> Result<(), TensorIoError> {
    fs::create_dir_all(dir).map_err(|source| TensorIoError::Io { path: dir.to_path_buf(), source })?;
    write_tensor_bin(&tensor_path(dir, name), t)
}

pub fn read_tensors(dir: &Path, names: &[&str]) -> Result<NamedTensors, TensorIoError> {
    names.iter().map(|n| Ok((n.to_string(), read_tensor(dir, n)?))).collect()
}

pub fn write_tensors(dir: &Path, tensors: &NamedTensors) -> Result<(), TensorIoError> {
    tensors.iter().try_for_each(|(n, t)| write_tensor(dir, n, t))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_through_directory() {
        let dir = tempfile::tempdir().unwrap();
        let sub = dir.path().join("nested");
        let t = TensorValue { shape: vec![2, 3], data: vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5, f32::NAN, 6.0] };
        let named: NamedTensors = [("x".to_string(), t.clone())].into_iter().collect();
        write_tensors(&sub, &named).unwrap();
        let back = read_tensors(&sub, &["x"]).unwrap();
        assert_eq!(back["x"].shape, t.shape);
        assert!(back["x"].data.iter().zip(&t.data).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(fs::read_to_string(sub.join("x.f32.shape")).unwrap(), "2 3\n");
    }

    #[test]
    fn missing_tensor_names_its_file() {
        let dir = tempfile::tempdir().unwrap();
        let e = read_tensor(dir.path(), "g").unwrap_err().to_string();
        assert!(e.contains("g.f32.shape"), "{e}");
    }
}
