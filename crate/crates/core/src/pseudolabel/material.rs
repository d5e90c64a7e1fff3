use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::mask::{InstanceMask, MaskSet, SourceTag};
use super::segment::{component_mask, components};
use crate::cube::HyperCube;

/// Material segmenter contract: full-spectrum input, material-level masks out.
pub trait MaterialSegmenter: Sync {
    fn segment(&self, cube: &HyperCube) -> MaskSet;
}

/// k-means over per-pixel spectra followed by connected components per cluster.
///
/// Centers are seeded by farthest-point traversal from a seeded first pick. Seeding stops early
/// once every pixel coincides with a chosen center, so a cube with fewer distinct spectra than
/// `k` gets fewer clusters.
#[derive(Clone, Debug, PartialEq)]
pub struct KMeansSegmenter {
    pub k: usize,
    pub min_area: usize,
    pub seed: u64,
    pub max_iter: usize,
}

impl Default for KMeansSegmenter {
    fn default() -> Self {
        Self { k: 6, min_area: 16, seed: 0, max_iter: 50 }
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(centers: &[Vec<f64>], x: &[f64]) -> usize {
    let mut best = 0;
    let mut bd = f64::INFINITY;
    for (i, c) in centers.iter().enumerate() {
        let d = dist2(c, x);
        if d < bd {
            bd = d;
            best = i;
        }
    }
    best
}

impl KMeansSegmenter {
    /// Cluster index per pixel, row-major.
    pub fn cluster(&self, cube: &HyperCube) -> Vec<u32> {
        let (h, w) = (cube.height(), cube.width());
        let n = h * w;
        let pixels: Vec<Vec<f64>> = (0..n).map(|i| cube.spectrum(i / w, i % w).into_iter().map(f64::from).collect()).collect();
        let k = self.k.max(1);

        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut centers = vec![pixels[rng.gen_range(0..n)].clone()];
        let mut mind: Vec<f64> = pixels.iter().map(|p| dist2(p, &centers[0])).collect();
        while centers.len() < k {
            let (far, &fd) =
                mind.iter().enumerate().fold((0, &f64::NEG_INFINITY), |acc, (i, d)| if *d > *acc.1 { (i, d) } else { acc });
            if fd <= 0.0 {
                break;
            }
            centers.push(pixels[far].clone());
            let c = centers.last().unwrap();
            for (m, p) in mind.iter_mut().zip(&pixels) {
                *m = m.min(dist2(p, c));
            }
        }

        let mut assign: Vec<usize> = pixels.iter().map(|p| nearest(&centers, p)).collect();
        for _ in 0..self.max_iter {
            let dims = centers[0].len();
            let mut sums = vec![vec![0.0; dims]; centers.len()];
            let mut counts = vec![0usize; centers.len()];
            for (p, &a) in pixels.iter().zip(&assign) {
                counts[a] += 1;
                for (s, v) in sums[a].iter_mut().zip(p) {
                    *s += v;
                }
            }
            for (i, c) in centers.iter_mut().enumerate() {
                if counts[i] > 0 {
                    for (cv, s) in c.iter_mut().zip(&sums[i]) {
                        *cv = s / counts[i] as f64;
                    }
                }
            }
            let next: Vec<usize> = pixels.iter().map(|p| nearest(&centers, p)).collect();
            if next == assign {
                break;
            }
            assign = next;
        }
        assign.into_iter().map(|a| a as u32).collect()
    }
}

pub const MATERIAL_SCORE: f32 = 0.5;

impl MaterialSegmenter for KMeansSegmenter {
    fn segment(&self, cube: &HyperCube) -> MaskSet {
        let (h, w) = (cube.height(), cube.width());
        let labels = self.cluster(cube);
        let masks = components(&labels, h, w)
            .into_iter()
            .filter(|c| c.len() >= self.min_area)
            .enumerate()
            .map(|(id, comp)| {
                InstanceMask::new(h, w, component_mask(&comp, h, w), MATERIAL_SCORE, SourceTag::Material, id as u32)
                    .expect("component is non-empty")
            })
            .collect();
        MaskSet::new(h, w, masks).expect("sequential ids")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cube_from(h: usize, w: usize, wl: Vec<f32>, f: impl Fn(usize, usize) -> Vec<f32>) -> HyperCube {
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
    fn single_material_one_mask() {
        let cube = cube_from(8, 8, vec![500.0, 600.0, 700.0, 800.0], |_, _| vec![0.2, 0.4, 0.6, 0.8]);
        let set = KMeansSegmenter::default().segment(&cube);
        assert_eq!(set.len(), 1);
        assert_eq!(set.masks[0].area(), 64);
    }

    #[test]
    fn k1_covers_everything() {
        let cube = cube_from(8, 8, vec![500.0, 600.0, 700.0], |r, c| vec![(r * 8 + c) as f32 / 64.0, 0.5, 0.5]);
        let seg = KMeansSegmenter { k: 1, ..Default::default() };
        let set = seg.segment(&cube);
        assert_eq!(set.len(), 1);
        assert_eq!(set.masks[0].area(), 64);
    }

    #[test]
    fn separates_two_materials() {
        let cube =
            cube_from(8, 8, vec![500.0, 600.0, 700.0], |_, c| if c < 4 { vec![0.1, 0.1, 0.1] } else { vec![0.9, 0.9, 0.9] });
        let set = KMeansSegmenter::default().segment(&cube);
        assert_eq!(set.len(), 2);
        assert!(set.masks.iter().all(|m| m.area() == 32));
    }
}
