use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{Attention, Linear, Mlp, Norm};
use crate::numerics::{init, Graph, ParamId, ParamStore, Partition, Scalar, Tensor, Var};

/// Desk-sized model scales as `(depth, token dim)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelScale {
    Small,
    Base,
    Large,
}

impl ModelScale {
    pub fn depth_dim(self) -> (usize, usize) {
        match self {
            ModelScale::Small => (4, 64),
            ModelScale::Base => (8, 128),
            ModelScale::Large => (12, 192),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelScale::Small => "small",
            ModelScale::Base => "base",
            ModelScale::Large => "large",
        }
    }
}

impl FromStr for ModelScale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "small" => Ok(ModelScale::Small),
            "base" => Ok(ModelScale::Base),
            "large" => Ok(ModelScale::Large),
            _ => Err(Error::Invalid(format!("unknown model scale {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Side of the learned positional grid; token grids up to this size are supported.
    pub pos_grid: usize,
}

impl EncoderConfig {
    pub fn scale(scale: ModelScale) -> Self {
        let (depth, dim) = scale.depth_dim();
        Self { depth, dim, heads: dim / 32, mlp_ratio: 4, pos_grid: 16 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Invalid(format!("token dim {} not divisible by {} heads", self.dim, self.heads)));
        }
        if self.pos_grid == 0 || self.mlp_ratio == 0 {
            return Err(Error::Invalid("pos_grid and mlp_ratio must be positive".into()));
        }
        Ok(())
    }
}

/// Separable bilinear weights `[rows·cols, grid²]` taking a `grid × grid` table to a
/// `rows × cols` one with pixel-center alignment. Equal sizes give the identity.
pub fn interpolation_matrix(rows: usize, cols: usize, grid: usize) -> Vec<f64> {
    let axis = |n: usize| -> Vec<Vec<f64>> {
        (0..n)
            .map(|i| {
                let mut w = vec![0.0; grid];
                let s = ((i as f64 + 0.5) * grid as f64 / n as f64 - 0.5).clamp(0.0, (grid - 1) as f64);
                let lo = s.floor() as usize;
                let hi = (lo + 1).min(grid - 1);
                let f = s - lo as f64;
                w[lo] += 1.0 - f;
                w[hi] += f;
                w
            })
            .collect()
    };
    let (wr, wc) = (axis(rows), axis(cols));
    let mut m = vec![0.0; rows * cols * grid * grid];
    for r in 0..rows {
        for c in 0..cols {
            let row = &mut m[(r * cols + c) * grid * grid..(r * cols + c + 1) * grid * grid];
            for gr in 0..grid {
                if wr[r][gr] == 0.0 {
                    continue;
                }
                for gc in 0..grid {
                    row[gr * grid + gc] = wr[r][gr] * wc[c][gc];
                }
            }
        }
    }
    m
}

#[derive(Clone, Copy, Debug)]
struct Block {
    norm1: Norm,
    attn: Attention,
    norm2: Norm,
    mlp: Mlp,
}

/// Pre-norm transformer encoder with learned, interpolated 2-D positional embeddings.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pos: ParamId,
    blocks: Vec<Block>,
}

impl Encoder {
    pub fn register<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        prefix: &str,
        partition: Partition,
        config: EncoderConfig,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let g2 = config.pos_grid * config.pos_grid;
        let pos = store.add(format!("{prefix}.pos"), partition, init::normal(rng, &[g2, d], 0.02))?;
        let mut blocks = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            let p = format!("{prefix}.block{i}");
            blocks.push(Block {
                norm1: Norm::register(store, &format!("{p}.norm1"), partition, d)?,
                attn: Attention::register(store, rng, &format!("{p}.attn"), partition, d, config.heads)?,
                norm2: Norm::register(store, &format!("{p}.norm2"), partition, d)?,
                mlp: Mlp::register(store, rng, &format!("{p}.mlp"), partition, (d, config.mlp_ratio * d, d))?,
            });
        }
        Ok(Self { config, pos, blocks })
    }

    /// Positional embeddings `[rows·cols, d]` for a token grid.
    pub fn positions<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, rows: usize, cols: usize) -> Result<Var> {
        let grid = self.config.pos_grid;
        if rows > grid || cols > grid || rows == 0 || cols == 0 {
            return Err(Error::GridOverflow { rows, cols, max: grid });
        }
        let pos = g.param(store, self.pos);
        if rows == grid && cols == grid {
            return Ok(pos);
        }
        let m = g.input(Tensor::from_f64(&[rows * cols, grid * grid], &interpolation_matrix(rows, cols, grid))?);
        g.matmul(m, pos)
    }

    /// Features with the same `[rows·cols, d]` shape as the input tokens.
    pub fn encode<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        tokens: Var,
        rows: usize,
        cols: usize,
    ) -> Result<Var> {
        let shape = g.value(tokens).shape().to_vec();
        if shape != [rows * cols, self.config.dim] {
            return Err(Error::shape(format!("encoder: tokens {shape:?} for {rows}x{cols}x{}", self.config.dim)));
        }
        let pos = self.positions(g, store, rows, cols)?;
        let mut x = g.add(tokens, pos)?;
        for b in &self.blocks {
            let n = b.norm1.forward(g, store, x)?;
            let a = b.attn.forward(g, store, n, n)?;
            x = g.add(x, a)?;
            let n = b.norm2.forward(g, store, x)?;
            let m = b.mlp.forward(g, store, n)?;
            x = g.add(x, m)?;
        }
        Ok(x)
    }
}

/// Per-token projection to the decoder width followed by layer norm.
#[derive(Clone, Copy, Debug)]
pub struct Neck {
    proj: Linear,
    norm: Norm,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Neck {
    pub fn register<T: Scalar, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, in_dim: usize, out_dim: usize) -> Result<Self> {
        let proj = Linear::register(store, rng, "neck.proj", Partition::Backbone, in_dim, out_dim)?;
        let norm = Norm::register(store, "neck.norm", Partition::Backbone, out_dim)?;
        Ok(Self { proj, norm, in_dim, out_dim })
    }

    pub fn projection(&self) -> (ParamId, ParamId) {
        (self.proj.weight, self.proj.bias.expect("neck projection has a bias"))
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, d: Var) -> Result<Var> {
        let y = self.proj.forward(g, store, d)?;
        self.norm.forward(g, store, y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, DEFAULT_EPS};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(depth: usize) -> (ParamStore<f64>, Encoder) {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let cfg = EncoderConfig { depth, dim: 8, heads: 2, mlp_ratio: 2, pos_grid: 4 };
        let enc = Encoder::register(&mut store, &mut rng, "encoder", Partition::Backbone, cfg).unwrap();
        (store, enc)
    }

    #[test]
    fn interpolation_identity_and_rows_sum_to_one() {
        let m = interpolation_matrix(3, 3, 3);
        for i in 0..9 {
            for j in 0..9 {
                assert_eq!(m[i * 9 + j], if i == j { 1.0 } else { 0.0 });
            }
        }
        let m = interpolation_matrix(2, 5, 7);
        for row in m.chunks(49) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn depth_zero_adds_positions() {
        let (store, enc) = tiny(0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t: Tensor<f64> = init::normal(&mut rng, &[16, 8], 1.0);
        let mut g = Graph::new();
        let x = g.input(t.clone());
        let d = enc.encode(&mut g, &store, x, 4, 4).unwrap();
        let pos = store.get(store.id("encoder.pos").unwrap());
        let expect: Vec<f64> = t.data().iter().zip(pos.data()).map(|(a, b)| a + b).collect();
        assert_eq!(g.value(d).data(), expect.as_slice());
    }

    #[test]
    fn shape_preserved_and_overflow_rejected() {
        let (store, enc) = tiny(2);
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[6, 8]));
        let d = enc.encode(&mut g, &store, x, 2, 3).unwrap();
        assert_eq!(g.value(d).shape(), &[6, 8]);
        let x = g.input(Tensor::zeros(&[25, 8]));
        assert!(matches!(enc.encode(&mut g, &store, x, 5, 5), Err(Error::GridOverflow { .. })));
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let (store, enc) = tiny(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t: Tensor<f64> = init::normal(&mut rng, &[4, 8], 1.0);
        let ids: Vec<ParamId> = store.ids().collect();
        let report = grad_check(
            |g, s| {
                let x = g.input(t.clone());
                let d = enc.encode(g, s, x, 2, 2)?;
                let sq = g.mul(d, d)?;
                Ok(g.mean_all(sq))
            },
            &store,
            &ids,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }

    #[test]
    fn identity_neck_is_layer_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let neck = Neck::register(&mut store, &mut rng, 4, 4).unwrap();
        let (w, _) = neck.projection();
        let eye: Vec<f64> = (0..16).map(|i| if i % 5 == 0 { 1.0 } else { 0.0 }).collect();
        store.get_mut(w).data_mut().copy_from_slice(&eye);
        let d: Tensor<f64> = init::normal(&mut rng, &[3, 4], 1.0);
        let mut g = Graph::new();
        let x = g.input(d);
        let f = neck.forward(&mut g, &store, x).unwrap();
        let ln = g.layer_norm(x, 1e-5).unwrap();
        assert_eq!(g.value(f), g.value(ln));
    }

    #[test]
    fn neck_gradients_reach_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::<f64>::new();
        let neck = Neck::register(&mut store, &mut rng, 6, 4).unwrap();
        let d: Tensor<f64> = init::normal(&mut rng, &[5, 6], 1.0);
        let (w, b) = neck.projection();
        let target: Tensor<f64> = init::normal(&mut rng, &[5, 4], 1.0);
        let report = grad_check(
            |g, s| {
                let x = g.input(d.clone());
                let f = neck.forward(g, s, x)?;
                let t = g.input(target.clone());
                let p = g.mul(f, t)?;
                Ok(g.sum_all(p))
            },
            &store,
            &[w, b],
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }
}
