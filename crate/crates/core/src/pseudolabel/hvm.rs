//! `.hvm` mask files: run-length encoded binary masks with score and source tag.

use std::path::Path;

use super::mask::{InstanceMask, MaskSet, SourceTag};
use crate::codec::{dim_u32, read_file, write_file, Reader, Writer};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"HVM1";

/// `(start, len)` runs of set bits over the row-major flattening.
pub fn encode_runs(bits: &[bool]) -> Vec<(u32, u32)> {
    let mut runs = Vec::new();
    let mut i = 0;
    while i < bits.len() {
        if bits[i] {
            let start = i;
            while i < bits.len() && bits[i] {
                i += 1;
            }
            runs.push((start as u32, (i - start) as u32));
        } else {
            i += 1;
        }
    }
    runs
}

pub fn decode_runs(runs: &[(u32, u32)], n: usize) -> Result<Vec<bool>> {
    let mut bits = vec![false; n];
    let mut end = 0usize;
    for (k, &(start, len)) in runs.iter().enumerate() {
        let (start, len) = (start as usize, len as usize);
        if len == 0 || (k > 0 && start < end) || start + len > n {
            return Err(Error::Malformed(format!("run {k} ({start}, {len}) unsorted, empty or out of range")));
        }
        bits[start..start + len].fill(true);
        end = start + len;
    }
    Ok(bits)
}

pub fn masks_to_bytes(set: &MaskSet) -> Result<Vec<u8>> {
    let mut out = Writer::default();
    out.bytes(MAGIC);
    out.u32(dim_u32(set.height, "height")?);
    out.u32(dim_u32(set.width, "width")?);
    out.u32(dim_u32(set.masks.len(), "mask count")?);
    for m in &set.masks {
        out.f32(m.score);
        out.u8(m.source.tag());
        let runs = encode_runs(&m.bits);
        out.u32(dim_u32(runs.len(), "run count")?);
        for (s, l) in runs {
            out.u32(s);
            out.u32(l);
        }
    }
    Ok(out.buf)
}

/// Parses a mask file. Ids are assigned by position in the file.
pub fn masks_from_bytes(bytes: &[u8]) -> Result<MaskSet> {
    let mut r = Reader::new(bytes);
    r.magic(MAGIC)?;
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let n = r.u32()? as usize;
    let mut masks = Vec::with_capacity(n.min(1 << 16));
    for id in 0..n {
        let score = r.f32()?;
        let tag = r.u8()?;
        let source = SourceTag::from_tag(tag).ok_or_else(|| Error::Malformed(format!("source tag {tag}")))?;
        let n_runs = r.u32()? as usize;
        let raw = r.take(n_runs.checked_mul(8).ok_or_else(|| Error::Malformed("run count".into()))?)?;
        let runs: Vec<(u32, u32)> = raw
            .chunks_exact(8)
            .map(|b| (u32::from_le_bytes(b[0..4].try_into().unwrap()), u32::from_le_bytes(b[4..8].try_into().unwrap())))
            .collect();
        let bits = decode_runs(&runs, h * w)?;
        masks.push(InstanceMask::new(h, w, bits, score, source, id as u32)?);
    }
    r.finish()?;
    MaskSet::new(h, w, masks)
}

pub fn read_masks(path: impl AsRef<Path>) -> Result<MaskSet> {
    masks_from_bytes(&read_file(path.as_ref())?)
}

pub fn write_masks(set: &MaskSet, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &masks_to_bytes(set)?)
}
