//! Named-tensor container.
//!
//! A container is a directory holding `tensors.bin` (raw little-endian
//! element data, tensors back to back) and `tensors.manifest`, a text file
//! with one line per tensor:
//!
//! ```text
//! <name> <dtype> <rows> <cols> <byte offset> <byte length>
//! ```
//!
//! preceded by a `hynt-tensors 1` header line. Reloading is bit-exact.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;

use crate::error::{KernelError, Result};
use crate::params::ParamStore;
use crate::real::Real;

const HEADER: &str = "hynt-tensors 1";
const DATA_FILE: &str = "tensors.bin";
const MANIFEST_FILE: &str = "tensors.manifest";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        })
    }
}

impl FromStr for DType {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "f32" => Ok(DType::F32),
            "f64" => Ok(DType::F64),
            other => Err(format!("unknown dtype {other}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dtype: DType,
    pub shape: (usize, usize),
    pub data: Vec<u8>,
}

impl NamedTensor {
    pub fn from_array<T: Real>(name: impl Into<String>, a: &Array2<T>) -> Self {
        let mut data = Vec::with_capacity(a.len() * T::DTYPE.size());
        for &x in a.iter() {
            x.write_le(&mut data);
        }
        Self {
            name: name.into(),
            dtype: T::DTYPE,
            shape: a.dim(),
            data,
        }
    }

    pub fn to_array<T: Real>(&self) -> Result<Array2<T>> {
        if self.dtype != T::DTYPE {
            return Err(KernelError::Invalid {
                op: "NamedTensor::to_array",
                detail: format!("{} stored as {}, requested {}", self.name, self.dtype, T::DTYPE),
            });
        }
        let values: Vec<T> = self.data.chunks_exact(self.dtype.size()).map(T::read_le).collect();
        Array2::from_shape_vec(self.shape, values).map_err(|e| KernelError::Invalid {
            op: "NamedTensor::to_array",
            detail: e.to_string(),
        })
    }
}

fn bad(path: &Path, detail: impl Into<String>) -> KernelError {
    KernelError::Checkpoint {
        path: path.display().to_string(),
        detail: detail.into(),
    }
}

pub fn write_container(dir: &Path, tensors: &[NamedTensor]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = format!("{HEADER}\n");
    let mut blob = Vec::new();
    for t in tensors {
        if t.name.is_empty() || t.name.chars().any(char::is_whitespace) {
            return Err(bad(dir, format!("invalid tensor name {:?}", t.name)));
        }
        if t.data.len() != t.shape.0 * t.shape.1 * t.dtype.size() {
            return Err(bad(dir, format!("{}: data length does not match shape", t.name)));
        }
        manifest.push_str(&format!(
            "{} {} {} {} {} {}\n",
            t.name,
            t.dtype,
            t.shape.0,
            t.shape.1,
            blob.len(),
            t.data.len()
        ));
        blob.extend_from_slice(&t.data);
    }
    fs::write(dir.join(DATA_FILE), blob)?;
    fs::write(dir.join(MANIFEST_FILE), manifest)?;
    Ok(())
}

pub fn read_container(dir: &Path) -> Result<Vec<NamedTensor>> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest = fs::read_to_string(&manifest_path)?;
    let blob = fs::read(dir.join(DATA_FILE))?;
    let mut lines = manifest.lines();
    if lines.next() != Some(HEADER) {
        return Err(bad(&manifest_path, "missing header"));
    }
    let mut out = Vec::new();
    for (n, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let lineno = n + 2;
        if fields.len() != 6 {
            return Err(bad(&manifest_path, format!("line {lineno}: expected 6 fields")));
        }
        let dtype: DType = fields[1]
            .parse()
            .map_err(|e: String| bad(&manifest_path, format!("line {lineno}: {e}")))?;
        let nums: Vec<usize> = fields[2..]
            .iter()
            .map(|f| f.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| bad(&manifest_path, format!("line {lineno}: {e}")))?;
        let (rows, cols, offset, len) = (nums[0], nums[1], nums[2], nums[3]);
        if len != rows * cols * dtype.size() || offset + len > blob.len() {
            return Err(bad(&manifest_path, format!("line {lineno}: inconsistent extent")));
        }
        out.push(NamedTensor {
            name: fields[0].to_string(),
            dtype,
            shape: (rows, cols),
            data: blob[offset..offset + len].to_vec(),
        });
    }
    Ok(out)
}

impl<T: Real> ParamStore<T> {
    pub fn to_named_tensors(&self) -> Vec<NamedTensor> {
        self.iter().map(|(_, name, v)| NamedTensor::from_array(name, v)).collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_container(dir, &self.to_named_tensors())
    }

    /// Overwrites every parameter of `self` from the container at `dir`.
    /// Names and shapes must match exactly.
    pub fn load_into(&mut self, dir: &Path) -> Result<()> {
        let tensors = read_container(dir)?;
        if tensors.len() != self.len() {
            return Err(bad(
                dir,
                format!("container has {} tensors, model expects {}", tensors.len(), self.len()),
            ));
        }
        for t in tensors {
            let id = self
                .id(&t.name)
                .ok_or_else(|| bad(dir, format!("unexpected tensor {}", t.name)))?;
            let value = t.to_array::<T>()?;
            if value.dim() != self.get(id).dim() {
                return Err(bad(
                    dir,
                    format!("{}: shape {:?}, expected {:?}", t.name, value.dim(), self.get(id).dim()),
                ));
            }
            *self.get_mut(id) = value;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn reload_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut ps = ParamStore::<f64>::new();
        ps.add("a", array![[0.1, -1.0 / 3.0], [1e-300, f64::MIN_POSITIVE]]).unwrap();
        ps.add("b.bias", array![[std::f64::consts::PI]]).unwrap();
        ps.save(dir.path()).unwrap();

        let mut fresh = ParamStore::<f64>::new();
        fresh.add("a", Array2::zeros((2, 2))).unwrap();
        fresh.add("b.bias", Array2::zeros((1, 1))).unwrap();
        fresh.load_into(dir.path()).unwrap();
        for ((_, _, x), (_, _, y)) in ps.iter().zip(fresh.iter()) {
            let xb: Vec<u64> = x.iter().map(|v| v.to_bits()).collect();
            let yb: Vec<u64> = y.iter().map(|v| v.to_bits()).collect();
            assert_eq!(xb, yb);
        }
    }

    #[test]
    fn f32_round_trip_and_dtype_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let mut ps = ParamStore::<f32>::new();
        ps.add("w", array![[1.25f32, -0.1]]).unwrap();
        ps.save(dir.path()).unwrap();
        let loaded = read_container(dir.path()).unwrap();
        assert_eq!(loaded[0].dtype, DType::F32);
        assert_eq!(loaded[0].to_array::<f32>().unwrap(), array![[1.25f32, -0.1]]);
        assert!(loaded[0].to_array::<f64>().is_err());
    }

    #[test]
    fn shape_mismatch_on_load_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut ps = ParamStore::<f64>::new();
        ps.add("w", Array2::zeros((2, 3))).unwrap();
        ps.save(dir.path()).unwrap();
        let mut other = ParamStore::<f64>::new();
        other.add("w", Array2::zeros((3, 2))).unwrap();
        assert!(other.load_into(dir.path()).is_err());
    }

    #[test]
    fn manifest_is_plain_text() {
        let dir = tempfile::tempdir().unwrap();
        let t = NamedTensor::from_array("layer0.q", &array![[1.0f64, 2.0]]);
        write_container(dir.path(), &[t]).unwrap();
        let text = fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(text, "hynt-tensors 1\nlayer0.q f64 1 2 0 16\n");
    }
}
