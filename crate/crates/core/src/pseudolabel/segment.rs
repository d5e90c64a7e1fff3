use std::collections::{BTreeMap, VecDeque};

use super::decompose::interior_point;
use super::mask::{InstanceMask, MaskSet, SourceTag};
use crate::cube::RgbImage;

/// 4-connected components of equal-valued pixels, in row-major order of their first pixel.
pub(crate) fn components(values: &[u32], height: usize, width: usize) -> Vec<Vec<usize>> {
    let mut seen = vec![false; values.len()];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..values.len() {
        if seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut comp = Vec::new();
        while let Some(i) = queue.pop_front() {
            comp.push(i);
            let (r, c) = (i / width, i % width);
            let mut visit = |j: usize| {
                if !seen[j] && values[j] == values[start] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            };
            if r > 0 {
                visit(i - width);
            }
            if r + 1 < height {
                visit(i + width);
            }
            if c > 0 {
                visit(i - 1);
            }
            if c + 1 < width {
                visit(i + 1);
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

pub(crate) fn component_mask(comp: &[usize], height: usize, width: usize) -> Vec<bool> {
    let mut bits = vec![false; height * width];
    for &i in comp {
        bits[i] = true;
    }
    bits
}

/// Seed points carried between false-color frames.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SequenceMemory {
    /// Interior point `(row, col)` per mask id.
    pub seeds: BTreeMap<u32, (usize, usize)>,
    pub frame: usize,
    pub next_id: u32,
}

/// Image segmenter contract standing in for a promptless foundation segmenter.
pub trait Segmenter: Sync {
    fn segment(&self, image: &RgbImage, memory: Option<&SequenceMemory>) -> (MaskSet, SequenceMemory);
}

/// Quantizes each channel into `levels` bins and emits the 4-connected components of the joint
/// color, dropping components smaller than `min_area`.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleSegmenter {
    pub levels: u32,
    pub min_area: usize,
}

impl Default for OracleSegmenter {
    fn default() -> Self {
        Self { levels: 8, min_area: 16 }
    }
}

pub const ORACLE_SCORE: f32 = 0.5;

impl OracleSegmenter {
    fn quantize(&self, v: f32) -> u32 {
        let q = (v.clamp(0.0, 1.0) * self.levels as f32).floor() as u32;
        q.min(self.levels - 1)
    }
}

impl Segmenter for OracleSegmenter {
    fn segment(&self, image: &RgbImage, memory: Option<&SequenceMemory>) -> (MaskSet, SequenceMemory) {
        let (h, w) = (image.height, image.width);
        let l = self.levels;
        let codes: Vec<u32> = (0..h * w)
            .map(|i| {
                let px = image.pixel(i / w, i % w);
                (self.quantize(px[0]) * l + self.quantize(px[1])) * l + self.quantize(px[2])
            })
            .collect();

        let mut next = memory.into_iter().map(|m| m.next_id).next().unwrap_or(0);
        let mut mem = memory.cloned().unwrap_or_default();
        let mut masks = Vec::new();
        for comp in components(&codes, h, w) {
            if comp.len() < self.min_area {
                continue;
            }
            let bits = component_mask(&comp, h, w);
            let inherited = memory.and_then(|m| m.seeds.iter().find(|(_, &(r, c))| bits[r * w + c]).map(|(&id, _)| id));
            let id = inherited.unwrap_or_else(|| {
                next += 1;
                next - 1
            });
            let mask = InstanceMask::new(h, w, bits, ORACLE_SCORE, SourceTag::Rgb, id).expect("component is non-empty");
            mem.seeds.insert(id, interior_point(&mask));
            masks.push(mask);
        }
        mem.frame += 1;
        mem.next_id = next;
        let set = MaskSet::new(h, w, masks).expect("ids are unique: seeds lie in at most one component");
        (set, mem)
    }
}
