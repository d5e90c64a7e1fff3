use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use super::hvm::read_masks;
use super::mask::{InstanceMask, MaskSet, SourceTag};
use super::material::{KMeansSegmenter, MaterialSegmenter};
use super::nms::{nms_fuse, nms_indices, rank_order, FusionConfig, PseudoTarget};
use super::segment::{OracleSegmenter, Segmenter, SequenceMemory};
use crate::cube::{rgb_projection, sequence_partition, HyperCube};
use crate::error::{Error, Result};

/// Masks from the segmenter applied to the false-color projection of the cube.
pub fn source_rgb(cube: &HyperCube, segmenter: &dyn Segmenter) -> Result<MaskSet> {
    let rgb = rgb_projection(cube)?;
    let (set, _) = segmenter.segment(&rgb, None);
    Ok(set.retagged(SourceTag::Rgb))
}

/// Masks from the false-color frame sequence, segmented in order with memory threaded through,
/// then consolidated by suppression at `tau`. Retained masks that share an id (a region whose
/// shape changed between frames) are given fresh ids after the first.
pub fn source_sequence(cube: &HyperCube, segmenter: &dyn Segmenter, tau: f64) -> Result<MaskSet> {
    let frames = sequence_partition(cube)?;
    let (h, w) = (cube.height(), cube.width());
    let mut memory: Option<SequenceMemory> = None;
    let mut pool = Vec::new();
    for frame in &frames {
        let (set, next) = segmenter.segment(frame, memory.as_ref());
        pool.extend(set.masks);
        memory = Some(next);
    }
    let kept = nms_indices(&pool, tau, usize::MAX)?;
    let mut next_id = pool.iter().map(|m| m.id).max().map_or(0, |m| m + 1);
    let mut seen = BTreeSet::new();
    let mut masks = Vec::with_capacity(kept.len());
    for i in kept {
        let mut m = pool[i].clone();
        m.source = SourceTag::Seq;
        if !seen.insert(m.id) {
            m.id = next_id;
            next_id += 1;
        }
        masks.push(m);
    }
    MaskSet::new(h, w, masks)
}

pub fn source_material(cube: &HyperCube, segmenter: &dyn MaterialSegmenter) -> MaskSet {
    segmenter.segment(cube).retagged(SourceTag::Material)
}

/// Precomputed masks stored as one `.hvm` file per cube, named after the cube's file stem.
#[derive(Clone, Debug)]
pub struct FileSource {
    pub dir: PathBuf,
}

impl FileSource {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn path_for(&self, name: &str) -> PathBuf {
        self.dir.join(format!("{name}.hvm"))
    }

    /// Masks for the named cube, tagged as file-sourced. A missing file yields no masks.
    pub fn masks(&self, name: &str, height: usize, width: usize) -> Result<MaskSet> {
        let path = self.path_for(name);
        if !path.exists() {
            return Ok(MaskSet::empty(height, width));
        }
        let set = read_masks(&path)?;
        if (set.height, set.width) != (height, width) {
            return Err(Error::shape(format!(
                "{}: masks are {}x{}, cube is {height}x{width}",
                path.display(),
                set.height,
                set.width
            )));
        }
        Ok(set.retagged(SourceTag::File))
    }
}

/// Which candidate sources feed fusion, plus their settings.
#[derive(Clone, Debug)]
pub struct PseudoLabeler {
    pub sources: Vec<SourceTag>,
    pub fusion: FusionConfig,
    pub segmenter: OracleSegmenter,
    pub material: KMeansSegmenter,
    pub files: Option<FileSource>,
}

impl PseudoLabeler {
    pub fn new(sources: Vec<SourceTag>, fusion: FusionConfig) -> Self {
        let segmenter = OracleSegmenter { min_area: fusion.min_area, ..Default::default() };
        let material = KMeansSegmenter { min_area: fusion.min_area, ..Default::default() };
        Self { sources, fusion, segmenter, material, files: None }
    }

    /// All candidate masks of one cube, in source order. Masks below `min_area` are dropped.
    pub fn pool(&self, name: &str, cube: &HyperCube) -> Result<Vec<InstanceMask>> {
        let mut pool = Vec::new();
        for &source in &self.sources {
            let set = match source {
                SourceTag::Rgb => source_rgb(cube, &self.segmenter)?,
                SourceTag::Seq => source_sequence(cube, &self.segmenter, self.fusion.tau)?,
                SourceTag::Material => source_material(cube, &self.material),
                SourceTag::File => match &self.files {
                    Some(files) => files.masks(name, cube.height(), cube.width())?,
                    None => return Err(Error::Invalid("file mask source selected without a directory".into())),
                },
            };
            pool.extend(set.masks.into_iter().filter(|m| m.area() >= self.fusion.min_area));
        }
        Ok(pool)
    }

    /// Fused target for one cube, or `None` when no source produced a mask.
    pub fn target(&self, name: &str, cube: &HyperCube) -> Result<Option<PseudoTarget>> {
        let pool = self.pool(name, cube)?;
        if pool.is_empty() {
            return Ok(None);
        }
        nms_fuse(&pool, &self.fusion).map(Some)
    }
}

/// Writes the fused parts of a target as a mask set in rank order.
pub fn target_masks(target: &PseudoTarget) -> Result<MaskSet> {
    let mut parts = target.parts.clone();
    parts.sort_by(rank_order);
    let masks = parts
        .into_iter()
        .enumerate()
        .map(|(i, mut m)| {
            m.id = i as u32;
            m
        })
        .collect();
    MaskSet::new(target.height, target.width, masks)
}

/// File stem used to pair cubes with their labels, masks and teacher features.
pub fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cube::{synth_scene, SynthSpec};

    fn flat_cube(h: usize, w: usize, wl: Vec<f32>, f: impl Fn(usize, usize) -> Vec<f32>) -> HyperCube {
        let c = wl.len();
        let mut data = vec![0.0; h * w * c];
        for r in 0..h {
            for col in 0..w {
                for (b, v) in f(r, col).into_iter().enumerate() {
                    data[(b * h + r) * w + col] = v;
                }
            }
        }
        HyperCube::new(h, w, wl, data).unwrap()
    }

    #[test]
    fn rgb_source_recovers_noiseless_regions() {
        let spec = SynthSpec { noise_sigma: 0.0, ..SynthSpec::default() };
        let scene = synth_scene(&spec).unwrap();
        let set = source_rgb(&scene.cube, &OracleSegmenter::default()).unwrap();
        assert!(set.masks.iter().all(|m| m.source == SourceTag::Rgb));
        for region in &scene.masks.masks {
            if region.area() < 16 {
                continue;
            }
            let best = set.masks.iter().map(|m| crate::pseudolabel::iou(m, region).unwrap()).fold(0.0, f64::max);
            assert!(best >= 0.99, "region {} best IoU {best}", region.id);
        }
    }

    #[test]
    fn uniform_cube_single_mask() {
        let cube = flat_cube(8, 8, vec![450.0, 550.0, 650.0], |_, _| vec![0.3, 0.3, 0.3]);
        assert_eq!(source_rgb(&cube, &OracleSegmenter::default()).unwrap().len(), 1);
        assert_eq!(source_sequence(&cube, &OracleSegmenter::default(), 0.7).unwrap().len(), 1);
    }

    #[test]
    fn too_few_bands_rejected() {
        let cube = flat_cube(4, 4, vec![400.0, 700.0], |_, _| vec![0.1, 0.2]);
        assert!(source_rgb(&cube, &OracleSegmenter::default()).is_err());
        assert!(source_sequence(&cube, &OracleSegmenter::default(), 0.7).is_err());
    }

    #[test]
    fn sequence_collapses_repeated_regions() {
        // the square is visible in every frame
        let wl: Vec<f32> = (0..12).map(|i| 450.0 + 25.0 * i as f32).collect();
        let cube = flat_cube(16, 16, wl, |r, c| {
            let inside = (4..12).contains(&r) && (4..12).contains(&c);
            vec![if inside { 0.9 } else { 0.1 }; 12]
        });
        let seg = OracleSegmenter::default();
        let set = source_sequence(&cube, &seg, 0.7).unwrap();
        assert_eq!(set.len(), 2);
        assert!(set.masks.iter().all(|m| m.source == SourceTag::Seq));
    }

    #[test]
    fn sequence_drops_small_band_local_artifact() {
        let wl: Vec<f32> = (0..6).map(|i| 450.0 + 50.0 * i as f32).collect();
        let cube = flat_cube(16, 16, wl, |r, c| {
            let mut v = vec![0.5; 6];
            if (2..4).contains(&r) && (2..5).contains(&c) {
                v[1] = 0.95; // only frame 1 (bands 1, 3, 5) sees it
            }
            v
        });
        let set = source_sequence(&cube, &OracleSegmenter::default(), 0.7).unwrap();
        // frame 1's background has a 6-pixel hole and overlaps frame 0's at IoU 250/256
        assert_eq!(set.len(), 1);
        assert_eq!(set.masks[0].area(), 256);
    }

    #[test]
    fn material_separates_rgb_metamers() {
        let wl = vec![450.0, 550.0, 650.0, 800.0, 900.0];
        let cube =
            flat_cube(16, 16, wl, |_, c| if c < 8 { vec![0.4, 0.5, 0.6, 0.2, 0.2] } else { vec![0.4, 0.5, 0.6, 0.8, 0.9] });
        let rgb = source_rgb(&cube, &OracleSegmenter::default()).unwrap();
        assert_eq!(rgb.len(), 1);
        assert_eq!(rgb.masks[0].area(), 256);
        let mat = source_material(&cube, &KMeansSegmenter::default());
        assert_eq!(mat.len(), 2);
        assert!(mat.masks.iter().all(|m| m.area() == 128 && m.source == SourceTag::Material));
    }

    #[test]
    fn labeler_fuses_all_sources() {
        let scene = synth_scene(&SynthSpec::default()).unwrap();
        let labeler = PseudoLabeler::new(vec![SourceTag::Rgb, SourceTag::Seq, SourceTag::Material], FusionConfig::default());
        let t = labeler.target("x", &scene.cube).unwrap().unwrap();
        assert!(!t.parts.is_empty() && t.parts.len() <= 16);
        let again = labeler.target("x", &scene.cube).unwrap().unwrap();
        assert_eq!(t, again);
    }

    #[test]
    fn missing_file_source_is_empty() {
        let dir = tempfile::tempdir().unwrap();
        let files = FileSource::new(dir.path());
        assert!(files.masks("nothing", 4, 4).unwrap().is_empty());
    }
}
