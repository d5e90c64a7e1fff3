use std::path::Path;

use super::{HyperCube, LabelMap};
use crate::codec::{dim_u32, read_file, write_file, Reader, Writer};
use crate::error::{Error, Result};

const CUBE_MAGIC: &[u8; 4] = b"HVC1";
const LABEL_MAGIC: &[u8; 4] = b"HVL1";

impl HyperCube {
    /// Parses the `.hvc` layout: magic, `u32` h, w, c, `c` wavelengths, then `c` row-major
    /// band planes, all little-endian.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(CUBE_MAGIC)?;
        let h = r.u32()? as usize;
        let w = r.u32()? as usize;
        let c = r.u32()? as usize;
        let wavelengths = r.f32s(c)?;
        let n = h.checked_mul(w).and_then(|v| v.checked_mul(c)).ok_or_else(|| Error::Malformed("cube dims overflow".into()))?;
        let data = r.f32s(n)?;
        r.finish()?;
        HyperCube::new(h, w, wavelengths, data)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Writer::with_capacity(16 + 4 * (self.wavelengths.len() + self.data.len()));
        out.bytes(CUBE_MAGIC);
        out.u32(dim_u32(self.height, "height")?);
        out.u32(dim_u32(self.width, "width")?);
        out.u32(dim_u32(self.bands(), "bands")?);
        out.f32s(&self.wavelengths);
        out.f32s(&self.data);
        Ok(out.buf)
    }
}

pub fn read_cube(path: impl AsRef<Path>) -> Result<HyperCube> {
    HyperCube::from_bytes(&read_file(path.as_ref())?)
}

/// Writes a cube. Cubes are validated on construction; the finiteness check is repeated here so
/// a cube can never be written with non-finite data.
pub fn write_cube(cube: &HyperCube, path: impl AsRef<Path>) -> Result<()> {
    if let Some(index) = cube.data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    write_file(path.as_ref(), &cube.to_bytes()?)
}

impl LabelMap {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(LABEL_MAGIC)?;
        let h = r.u32()? as usize;
        let w = r.u32()? as usize;
        let k = r.u32()? as usize;
        let raw = r.take(h * w * 2)?;
        r.finish()?;
        let labels = raw.chunks_exact(2).map(|b| u16::from_le_bytes([b[0], b[1]])).collect();
        LabelMap::new(h, w, k, labels)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Writer::with_capacity(16 + 2 * self.labels.len());
        out.bytes(LABEL_MAGIC);
        out.u32(dim_u32(self.height, "height")?);
        out.u32(dim_u32(self.width, "width")?);
        out.u32(dim_u32(self.classes, "classes")?);
        for &l in &self.labels {
            out.u16(l);
        }
        Ok(out.buf)
    }
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelMap> {
    LabelMap::from_bytes(&read_file(path.as_ref())?)
}

pub fn write_labels(labels: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &labels.to_bytes()?)
}
