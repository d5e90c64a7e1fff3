use std::path::Path;

use crate::codec::{dim_u32, read_file, write_file, Reader, Writer};
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

const MAGIC: &[u8; 4] = b"HVT1";

/// Where in the model a feature grid was taken.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Tokens,
    Backbone,
    Neck,
    Student,
    Teacher,
}

/// Activations on a token grid, cell-major: `data[(row·cols + col)·dim + k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub rows: usize,
    pub cols: usize,
    pub dim: usize,
    pub stage: Stage,
    pub data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(rows: usize, cols: usize, dim: usize, stage: Stage, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols * dim {
            return Err(Error::shape(format!("{} values for a {rows}x{cols}x{dim} grid", data.len())));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { rows, cols, dim, stage, data })
    }

    pub fn from_tensor<T: Scalar>(rows: usize, cols: usize, stage: Stage, t: &Tensor<T>) -> Result<Self> {
        let dim = t.shape().last().copied().unwrap_or(0);
        Self::new(rows, cols, dim, stage, t.data().iter().map(|v| v.as_f64() as f32).collect())
    }

    /// `[rows·cols, dim]` tensor.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self.data.iter().map(|&v| T::of(v as f64)).collect();
        Tensor::new(vec![self.rows * self.cols, self.dim], data).expect("validated on construction")
    }

    pub fn get(&self, row: usize, col: usize) -> &[f32] {
        let i = (row * self.cols + col) * self.dim;
        &self.data[i..i + self.dim]
    }
}

pub fn features_to_bytes(f: &FeatureMap) -> Result<Vec<u8>> {
    let mut w = Writer::with_capacity(16 + 4 * f.data.len());
    w.bytes(MAGIC);
    w.u32(dim_u32(f.rows, "rows")?);
    w.u32(dim_u32(f.cols, "cols")?);
    w.u32(dim_u32(f.dim, "feature dim")?);
    w.f32s(&f.data);
    Ok(w.buf)
}

pub fn features_from_bytes(bytes: &[u8]) -> Result<FeatureMap> {
    let mut r = Reader::new(bytes);
    r.magic(MAGIC)?;
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let dim = r.u32()? as usize;
    let n = rows
        .checked_mul(cols)
        .and_then(|v| v.checked_mul(dim))
        .ok_or_else(|| Error::Malformed("feature grid size overflows".into()))?;
    let data = r.f32s(n)?;
    r.finish()?;
    FeatureMap::new(rows, cols, dim, Stage::Teacher, data)
}

pub fn read_features(path: impl AsRef<Path>) -> Result<FeatureMap> {
    features_from_bytes(&read_file(path.as_ref())?)
}

pub fn write_features(f: &FeatureMap, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &features_to_bytes(f)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_round_trip() {
        let f = FeatureMap::new(2, 3, 2, Stage::Teacher, (0..12).map(|i| i as f32 * 0.5 - 1.0).collect()).unwrap();
        let bytes = features_to_bytes(&f).unwrap();
        assert_eq!(bytes.len(), 16 + 48);
        let back = features_from_bytes(&bytes).unwrap();
        assert_eq!(back, f);
        assert_eq!(features_to_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn rejects_bad_files() {
        let f = FeatureMap::new(1, 1, 2, Stage::Teacher, vec![1.0, 2.0]).unwrap();
        let bytes = features_to_bytes(&f).unwrap();
        assert!(matches!(features_from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Truncated { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(features_from_bytes(&bad), Err(Error::BadMagic { .. })));
        let mut bad = bytes;
        bad[16..20].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(features_from_bytes(&bad), Err(Error::NonFinite { .. })));
    }
}
