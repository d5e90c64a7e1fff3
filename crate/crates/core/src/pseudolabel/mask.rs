use crate::error::{Error, Result};

/// Where a mask came from. The discriminant order is the fusion tie-break priority.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SourceTag {
    Rgb,
    Seq,
    Material,
    File,
}

impl SourceTag {
    pub fn tag(self) -> u8 {
        match self {
            SourceTag::Rgb => 0,
            SourceTag::Seq => 1,
            SourceTag::Material => 2,
            SourceTag::File => 3,
        }
    }

    pub fn from_tag(t: u8) -> Option<Self> {
        Some(match t {
            0 => SourceTag::Rgb,
            1 => SourceTag::Seq,
            2 => SourceTag::Material,
            3 => SourceTag::File,
            _ => return None,
        })
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "rgb" => SourceTag::Rgb,
            "seq" => SourceTag::Seq,
            "material" => SourceTag::Material,
            "file" => SourceTag::File,
            _ => return None,
        })
    }
}

/// A binary instance mask over one image, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceMask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
    pub score: f32,
    pub source: SourceTag,
    pub id: u32,
}

impl InstanceMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>, score: f32, source: SourceTag, id: u32) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::shape(format!("mask has {} bits, expected {}", bits.len(), height * width)));
        }
        if !bits.iter().any(|&b| b) {
            return Err(Error::Invalid("mask has no foreground pixels".into()));
        }
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::Invalid(format!("mask score {score} outside [0, 1]")));
        }
        Ok(Self { height, width, bits, score, source, id })
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }
}

/// `|a ∧ b| / |a ∨ b|`.
pub fn iou(a: &InstanceMask, b: &InstanceMask) -> Result<f64> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::shape(format!("iou: {}x{} vs {}x{}", a.height, a.width, b.height, b.width)));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.bits.iter().zip(&b.bits) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

/// Masks over one image with unique ids.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MaskSet {
    pub height: usize,
    pub width: usize,
    pub masks: Vec<InstanceMask>,
}

impl MaskSet {
    pub fn new(height: usize, width: usize, masks: Vec<InstanceMask>) -> Result<Self> {
        let mut ids = std::collections::HashSet::new();
        for m in &masks {
            if (m.height, m.width) != (height, width) {
                return Err(Error::shape(format!("mask {}x{} in {height}x{width} set", m.height, m.width)));
            }
            if !ids.insert(m.id) {
                return Err(Error::Invalid(format!("duplicate mask id {}", m.id)));
            }
        }
        Ok(Self { height, width, masks })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self { height, width, masks: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    /// Same masks with every source tag replaced.
    pub fn retagged(mut self, source: SourceTag) -> Self {
        for m in &mut self.masks {
            m.source = source;
        }
        self
    }
}
