//! Synthetic scenes: rectangles and ellipses of distinct materials over a background material.

use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{HyperCube, LabelMap};
use crate::error::{Error, Result};
use crate::pseudolabel::{InstanceMask, MaskSet, SourceTag};

const PLACEMENT_ATTEMPTS: usize = 200;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    /// Inclusive band-center range, nm. Bands are evenly spaced.
    pub wavelength_range: (f32, f32),
    /// Number of materials K, background included. Labels live in `[0, K)`.
    pub n_materials: usize,
    pub noise_sigma: f32,
    /// Drives placement and noise.
    pub seed: u64,
    /// Drives the material signatures; scenes sharing it share class semantics.
    pub library_seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            bands: 25,
            wavelength_range: (600.0, 975.0),
            n_materials: 5,
            noise_sigma: 0.02,
            seed: 0,
            library_seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_materials < 2 {
            return Err(Error::Invalid(format!("n_materials {} < 2", self.n_materials)));
        }
        if self.n_materials > u16::MAX as usize {
            return Err(Error::Invalid("too many materials".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Invalid(format!("noise_sigma {} < 0", self.noise_sigma)));
        }
        if self.bands == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Invalid("empty scene".into()));
        }
        let (lo, hi) = self.wavelength_range;
        if self.bands > 1 && !(lo < hi) {
            return Err(Error::Invalid(format!("wavelength range {lo}..{hi}")));
        }
        super::validate_wavelengths(&self.wavelengths())
    }

    /// The settings of image `index` in a set generated from this one: same everything except a
    /// placement seed derived from `(seed, index)`.
    pub fn for_image(&self, index: u64) -> SynthSpec {
        let seed = self.seed.rotate_left(17) ^ index.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        SynthSpec { seed, ..self.clone() }
    }

    pub fn wavelengths(&self) -> Vec<f32> {
        let (lo, hi) = self.wavelength_range;
        if self.bands == 1 {
            return vec![lo];
        }
        (0..self.bands).map(|i| lo + (hi - lo) * i as f32 / (self.bands - 1) as f32).collect()
    }
}

/// Per-material reflectance signatures: a base level plus two Gaussian bumps with distinct
/// centers.
#[derive(Clone, Debug, PartialEq)]
pub struct MaterialLibrary {
    pub materials: Vec<Signature>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Signature {
    pub base: f64,
    pub bumps: [(f64, f64, f64); 2],
}

impl Signature {
    pub fn at(&self, lambda: f64) -> f64 {
        let v = self
            .bumps
            .iter()
            .fold(self.base, |acc, &(amp, center, width)| acc + amp * (-(lambda - center).powi(2) / (2.0 * width * width)).exp());
        v.clamp(0.0, 1.0)
    }
}

impl MaterialLibrary {
    pub fn generate(n: usize, range: (f32, f32), seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (lo, hi) = (range.0 as f64, range.1 as f64);
        let span = (hi - lo).max(10.0);
        let materials = (0..n)
            .map(|_| {
                let base = rng.gen_range(0.05..0.35);
                let c1 = rng.gen_range(lo..=hi.max(lo + 1.0));
                let mut c2 = rng.gen_range(lo..=hi.max(lo + 1.0));
                while (c2 - c1).abs() < 0.1 * span {
                    c2 = rng.gen_range(lo - 0.2 * span..=hi + 0.2 * span);
                }
                let bump = |rng: &mut ChaCha8Rng, c: f64| (rng.gen_range(0.15..0.5), c, rng.gen_range(0.06..0.25) * span);
                let bumps = [bump(&mut rng, c1), bump(&mut rng, c2)];
                Signature { base, bumps }
            })
            .collect();
        Self { materials }
    }

    pub fn sample(&self, material: usize, wavelengths: &[f32]) -> Vec<f32> {
        wavelengths.iter().map(|&w| self.materials[material].at(w as f64) as f32).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RegionShape {
    Rectangle,
    Ellipse,
}

/// One entry of the generator's placement log.
#[derive(Clone, Debug, PartialEq)]
pub struct PlacedRegion {
    pub material: u16,
    pub shape: RegionShape,
    /// `(top, left, height, width)` bounding box.
    pub bbox: (usize, usize, usize, usize),
    pub pixels: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthScene {
    pub cube: HyperCube,
    pub labels: LabelMap,
    pub masks: MaskSet,
    pub placements: Vec<PlacedRegion>,
}

fn rasterize(h: usize, w: usize, shape: RegionShape, bbox: (usize, usize, usize, usize)) -> Vec<bool> {
    let (top, left, bh, bw) = bbox;
    let mut bits = vec![false; h * w];
    let (cy, cx) = (top as f64 + bh as f64 / 2.0, left as f64 + bw as f64 / 2.0);
    let (ry, rx) = (bh as f64 / 2.0, bw as f64 / 2.0);
    for r in top..top + bh {
        for c in left..left + bw {
            let inside = match shape {
                RegionShape::Rectangle => true,
                RegionShape::Ellipse => {
                    let dy = (r as f64 + 0.5 - cy) / ry;
                    let dx = (c as f64 + 0.5 - cx) / rx;
                    dy * dy + dx * dx <= 1.0
                }
            };
            bits[r * w + c] = inside;
        }
    }
    bits
}

/// Generates a labeled scene. Region `i` gets a distinct non-background material; a region that
/// cannot be placed without overlap after bounded retries is dropped.
pub fn synth_scene(spec: &SynthSpec) -> Result<SynthScene> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let wavelengths = spec.wavelengths();
    let library = MaterialLibrary::generate(spec.n_materials, spec.wavelength_range, spec.library_seed);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut order: Vec<u16> = (1..spec.n_materials as u16).collect();
    order.shuffle(&mut rng);

    let mut occupied = vec![false; h * w];
    let mut labels = vec![0u16; h * w];
    let mut placements = Vec::new();
    let (min_h, max_h) = ((h / 4).max(1), (h / 2).max(1));
    let (min_w, max_w) = ((w / 4).max(1), (w / 2).max(1));
    for material in order {
        let shape = if rng.gen_bool(0.5) { RegionShape::Rectangle } else { RegionShape::Ellipse };
        for _ in 0..PLACEMENT_ATTEMPTS {
            let bh = rng.gen_range(min_h..=max_h);
            let bw = rng.gen_range(min_w..=max_w);
            let top = rng.gen_range(0..=h - bh);
            let left = rng.gen_range(0..=w - bw);
            let pixels = rasterize(h, w, shape, (top, left, bh, bw));
            if pixels.iter().zip(&occupied).any(|(&p, &o)| p && o) || !pixels.iter().any(|&p| p) {
                continue;
            }
            for (i, &p) in pixels.iter().enumerate() {
                if p {
                    occupied[i] = true;
                    labels[i] = material;
                }
            }
            placements.push(PlacedRegion { material, shape, bbox: (top, left, bh, bw), pixels });
            break;
        }
    }

    let signatures: Vec<Vec<f32>> = (0..spec.n_materials).map(|m| library.sample(m, &wavelengths)).collect();
    let noise = Normal::new(0.0f32, spec.noise_sigma).map_err(|e| Error::Invalid(e.to_string()))?;
    let n = h * w;
    let mut data = vec![0f32; n * wavelengths.len()];
    for i in 0..n {
        let sig = &signatures[labels[i] as usize];
        for (b, &s) in sig.iter().enumerate() {
            let v = if spec.noise_sigma > 0.0 { s + noise.sample(&mut rng) } else { s };
            data[b * n + i] = v.clamp(0.0, 1.0);
        }
    }

    let cube = HyperCube::new(h, w, wavelengths, data)?;
    let labels = LabelMap::new(h, w, spec.n_materials, labels)?;
    let masks = placements
        .iter()
        .enumerate()
        .map(|(i, p)| InstanceMask::new(h, w, p.pixels.clone(), 1.0, SourceTag::File, i as u32))
        .collect::<Result<Vec<_>>>()?;
    let masks = MaskSet::new(h, w, masks)?;
    Ok(SynthScene { cube, labels, masks, placements })
}
