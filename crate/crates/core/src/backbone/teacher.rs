use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::encoder::{Encoder, EncoderConfig};
use super::features::{read_features, FeatureMap, Stage};
use crate::cube::RgbImage;
use crate::error::{Error, Result};
use crate::numerics::{init, Graph, ParamId, ParamStore, Partition, Tensor};

/// Frozen features for a false-color image on the `(h/p) × (w/p)` token grid.
pub trait TeacherProvider: Send + Sync {
    fn dim(&self) -> usize;

    /// Features for the image of the cube called `name`.
    fn features(&self, name: &str, rgb: &RgbImage) -> Result<FeatureMap>;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TeacherConfig {
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub pos_grid: usize,
    /// Multiplies the normalized output so per-token channel distributions are peaked.
    pub output_scale: f32,
    pub seed: u64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self { patch: 8, dim: 32, depth: 2, heads: 2, pos_grid: 16, output_scale: 4.0, seed: 0x7eac_4e25 }
    }
}

/// Randomly initialized, never trained RGB model: a patch convolution and a small transformer
/// whose normalized output is scaled. Same seed and input give identical bytes.
#[derive(Debug)]
pub struct ToyTeacher {
    pub config: TeacherConfig,
    store: ParamStore<f32>,
    patch_weight: ParamId,
    encoder: Encoder,
}

impl ToyTeacher {
    pub fn new(config: TeacherConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let p = config.patch;
        let scale = 1.0 / ((3 * p * p) as f64).sqrt();
        let patch_weight = store.add("teacher.patch", Partition::Head, init::uniform(&mut rng, &[config.dim, 3, p, p], scale))?;
        let enc =
            EncoderConfig { depth: config.depth, dim: config.dim, heads: config.heads, mlp_ratio: 2, pos_grid: config.pos_grid };
        let encoder = Encoder::register(&mut store, &mut rng, "teacher", Partition::Head, enc)?;
        store.freeze();
        Ok(Self { config, store, patch_weight, encoder })
    }

    /// The teacher's parameters. They are frozen: graphs built on them never track gradients
    /// and the optimizer refuses to step them.
    pub fn params(&self) -> &ParamStore<f32> {
        &self.store
    }
}

impl TeacherProvider for ToyTeacher {
    fn dim(&self) -> usize {
        self.config.dim
    }

    fn features(&self, _name: &str, rgb: &RgbImage) -> Result<FeatureMap> {
        let p = self.config.patch;
        let (h, w) = (rgb.height, rgb.width);
        if h % p != 0 || w % p != 0 {
            return Err(Error::NotDivisible { height: h, width: w, patch: p });
        }
        let (rows, cols) = (h / p, w / p);
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::new(vec![1, 3, h, w], rgb.data.clone())?);
        let wv = g.param(&self.store, self.patch_weight);
        let t = g.conv2d(x, wv, p)?;
        let t = g.reshape(t, &[self.config.dim, rows * cols])?;
        let t = g.transpose(t)?;
        let d = self.encoder.encode(&mut g, &self.store, t, rows, cols)?;
        let n = g.layer_norm(d, 1e-5)?;
        let out = g.scale(n, self.config.output_scale as f64);
        debug_assert!(!g.requires_grad(out));
        FeatureMap::from_tensor(rows, cols, Stage::Teacher, g.value(out))
    }
}

/// Precomputed teacher features, one `.hvt` file per cube named after the cube's file stem.
#[derive(Clone, Debug)]
pub struct FileTeacher {
    pub dir: PathBuf,
    pub patch: usize,
    pub dim: usize,
}

impl TeacherProvider for FileTeacher {
    fn dim(&self) -> usize {
        self.dim
    }

    fn features(&self, name: &str, rgb: &RgbImage) -> Result<FeatureMap> {
        let path = self.dir.join(format!("{name}.hvt"));
        let f = read_features(&path)?;
        let p = self.patch;
        if (f.rows * p, f.cols * p, f.dim) != (rgb.height, rgb.width, self.dim) {
            return Err(Error::shape(format!(
                "{}: {}x{}x{} features for a {}x{} image with patch {p} and dim {}",
                path.display(),
                f.rows,
                f.cols,
                f.dim,
                rgb.height,
                rgb.width,
                self.dim
            )));
        }
        Ok(f)
    }
}
