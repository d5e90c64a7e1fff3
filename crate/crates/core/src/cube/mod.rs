//! Hyperspectral cubes, label maps, false-color projections and the synthetic scene generator.

mod io;
mod synth;

pub use io::{read_cube, read_labels, write_cube, write_labels};
pub use synth::{synth_scene, MaterialLibrary, PlacedRegion, RegionShape, SynthScene, SynthSpec};

use crate::error::{Error, Result};

/// Lower edge of the supported spectral range, nm.
pub const MIN_WAVELENGTH: f32 = 370.0;
/// Upper (exclusive) edge of the supported spectral range, nm.
pub const MAX_WAVELENGTH: f32 = 1710.0;

/// Red, green, blue targets used for false-color projection, nm.
pub const RGB_TARGETS: [f32; 3] = [650.0, 550.0, 450.0];

/// An `h × w × c` reflectance volume.
///
/// Values are stored band-sequential: `data[band * h * w + row * w + col]`.
#[derive(Clone, Debug, PartialEq)]
pub struct HyperCube {
    height: usize,
    width: usize,
    wavelengths: Vec<f32>,
    data: Vec<f32>,
}

impl HyperCube {
    pub fn new(height: usize, width: usize, wavelengths: Vec<f32>, data: Vec<f32>) -> Result<Self> {
        validate_wavelengths(&wavelengths)?;
        let expected = height * width * wavelengths.len();
        if data.len() != expected {
            return Err(Error::shape(format!("cube data has {} values, expected {expected}", data.len())));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { height, width, wavelengths, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bands(&self) -> usize {
        self.wavelengths.len()
    }

    pub fn wavelengths(&self) -> &[f32] {
        &self.wavelengths
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn plane(&self, band: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[band * n..(band + 1) * n]
    }

    pub fn get(&self, row: usize, col: usize, band: usize) -> f32 {
        self.data[(band * self.height + row) * self.width + col]
    }

    /// Spectrum of one pixel.
    pub fn spectrum(&self, row: usize, col: usize) -> Vec<f32> {
        (0..self.bands()).map(|b| self.get(row, col, b)).collect()
    }
}

pub(crate) fn validate_wavelengths(wavelengths: &[f32]) -> Result<()> {
    for (band, &w) in wavelengths.iter().enumerate() {
        if !w.is_finite() || !(MIN_WAVELENGTH..MAX_WAVELENGTH).contains(&w) {
            return Err(Error::WavelengthOutOfRange(w));
        }
        if band > 0 && w <= wavelengths[band - 1] {
            return Err(Error::NonAscendingWavelengths { band });
        }
    }
    Ok(())
}

/// Three bands of a cube, channel-major (`data[ch * h * w + row * w + col]`).
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
    pub source_bands: [usize; 3],
}

impl RgbImage {
    pub fn pixel(&self, row: usize, col: usize) -> [f32; 3] {
        let n = self.height * self.width;
        let i = row * self.width + col;
        [self.data[i], self.data[n + i], self.data[2 * n + i]]
    }

    fn from_bands(cube: &HyperCube, bands: [usize; 3]) -> Self {
        let mut data = Vec::with_capacity(3 * cube.height * cube.width);
        for b in bands {
            data.extend_from_slice(cube.plane(b));
        }
        Self { height: cube.height, width: cube.width, data, source_bands: bands }
    }
}

/// Per-pixel class indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub labels: Vec<u16>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, classes: usize, labels: Vec<u16>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::shape(format!("label map has {} labels, expected {}", labels.len(), height * width)));
        }
        if let Some(&l) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::ClassMismatch(format!("label {l} outside [0, {classes})")));
        }
        Ok(Self { height, width, classes, labels })
    }

    pub fn get(&self, row: usize, col: usize) -> u16 {
        self.labels[row * self.width + col]
    }

    /// Sorted distinct labels present.
    pub fn present(&self) -> Vec<u16> {
        let mut seen = vec![false; self.classes];
        for &l in &self.labels {
            seen[l as usize] = true;
        }
        (0..self.classes as u16).filter(|&l| seen[l as usize]).collect()
    }
}

/// Index of the band nearest `target`; ties go to the lower band.
pub fn nearest_band(wavelengths: &[f32], target: f32) -> usize {
    let mut best = 0;
    for (i, &w) in wavelengths.iter().enumerate() {
        if (w - target).abs() < (wavelengths[best] - target).abs() {
            best = i;
        }
    }
    best
}

/// The three bands nearest 650, 550 and 450 nm, in that order. Duplicates are allowed.
pub fn key_bands(wavelengths: &[f32]) -> Result<[usize; 3]> {
    if wavelengths.len() < 3 {
        return Err(Error::TooFewBands(wavelengths.len()));
    }
    Ok(RGB_TARGETS.map(|t| nearest_band(wavelengths, t)))
}

/// False-color image from the bands nearest the RGB primaries.
pub fn rgb_projection(cube: &HyperCube) -> Result<RgbImage> {
    Ok(RgbImage::from_bands(cube, key_bands(cube.wavelengths())?))
}

/// `floor(c / 3)` false-color frames; frame `t` takes bands `(t, t + N, t + 2N)`.
pub fn sequence_partition(cube: &HyperCube) -> Result<Vec<RgbImage>> {
    let c = cube.bands();
    if c < 3 {
        return Err(Error::TooFewBands(c));
    }
    let n = c / 3;
    Ok((0..n).map(|t| RgbImage::from_bands(cube, [t, t + n, t + 2 * n])).collect())
}

/// Crops to the largest multiples of `p` in each dimension. When the surplus is odd the extra
/// row (column) is dropped from the bottom (right).
pub fn center_crop_to_patch(cube: &HyperCube, p: usize) -> Result<HyperCube> {
    let (h, w) = (cube.height, cube.width);
    if p == 0 || h < p || w < p {
        return Err(Error::TooSmall { height: h, width: w, patch: p });
    }
    let (oh, ow) = (h / p * p, w / p * p);
    let (top, left) = ((h - oh) / 2, (w - ow) / 2);
    let mut data = Vec::with_capacity(oh * ow * cube.bands());
    for b in 0..cube.bands() {
        let plane = cube.plane(b);
        for r in top..top + oh {
            data.extend_from_slice(&plane[r * w + left..r * w + left + ow]);
        }
    }
    Ok(HyperCube { height: oh, width: ow, wavelengths: cube.wavelengths.clone(), data })
}
