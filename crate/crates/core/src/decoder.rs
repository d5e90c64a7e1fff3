//! Point prompts and the prompt-conditioned mask decoder.

use std::f64::consts::TAU;

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::Attention;
use crate::layers::{Linear, Mlp, Norm};
use crate::numerics::{init, Graph, ParamId, ParamStore, Partition, Scalar, Tensor, Var};
use crate::pseudolabel::InstanceMask;

/// A single foreground point, in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Prompt {
    pub row: usize,
    pub col: usize,
}

pub const DECODER_BLOCKS: usize = 2;

/// Highest frequency of the positional code, in cycles per image side.
pub const MAX_CYCLES: f64 = 8.0;

/// Four quarter blocks `[sin y, cos y, sin x, cos x]` over `d / 4` frequencies growing
/// geometrically from 1 to [`MAX_CYCLES`] cycles per unit.
fn encode_position(y: f64, x: f64, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 4 != 0 {
        return Err(Error::Invalid(format!("positional dimension {dim} not a positive multiple of 4")));
    }
    let nf = dim / 4;
    let mut out = vec![0.0; dim];
    for k in 0..nf {
        let f = MAX_CYCLES.powf(k as f64 / nf as f64);
        out[k] = (TAU * f * y).sin();
        out[nf + k] = (TAU * f * y).cos();
        out[2 * nf + k] = (TAU * f * x).sin();
        out[3 * nf + k] = (TAU * f * x).cos();
    }
    Ok(out)
}

/// Fixed sinusoidal encoding of `(row / h, col / w)`.
pub fn positional_encoding(prompt: Prompt, height: usize, width: usize, dim: usize) -> Result<Vec<f64>> {
    if prompt.row >= height || prompt.col >= width {
        return Err(Error::OutOfBounds { row: prompt.row, col: prompt.col, height, width });
    }
    encode_position(prompt.row as f64 / height as f64, prompt.col as f64 / width as f64, dim)
}

/// The same code at every token center of a `rows × cols` grid, `[rows·cols, dim]` row-major.
pub fn grid_encoding(rows: usize, cols: usize, dim: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(rows * cols * dim);
    for r in 0..rows {
        for c in 0..cols {
            out.extend(encode_position((r as f64 + 0.5) / rows as f64, (c as f64 + 0.5) / cols as f64, dim)?);
        }
    }
    Ok(out)
}

/// Learned foreground embedding added to the positional code.
#[derive(Clone, Copy, Debug)]
pub struct PromptEncoder {
    pub fg: ParamId,
    pub dim: usize,
}

impl PromptEncoder {
    pub fn register<T: Scalar, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, dim: usize) -> Result<Self> {
        let fg = store.add("prompt.fg", Partition::Head, init::normal(rng, &[dim], 0.02))?;
        Ok(Self { fg, dim })
    }

    /// Prompt token `[1, d]` for an image of the given pixel size.
    pub fn encode<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        prompt: Prompt,
        height: usize,
        width: usize,
    ) -> Result<Var> {
        let pe = positional_encoding(prompt, height, width, self.dim)?;
        let pe = g.input(Tensor::from_f64(&[1, self.dim], &pe)?);
        let fg = g.param(store, self.fg);
        g.add_row(pe, fg)
    }
}

#[derive(Clone, Copy, Debug)]
struct DecoderBlock {
    norm_t1: Norm,
    token_to_feature: Attention,
    norm_f: Norm,
    feature_to_token: Attention,
    norm_t2: Norm,
    mlp: Mlp,
}

/// Two-way attention decoder: an output token and the prompt token attend to the feature grid,
/// the grid attends back, and the final output token is turned into a per-cell dot-product
/// mask.
#[derive(Clone, Debug)]
pub struct MaskDecoder {
    out_token: ParamId,
    blocks: Vec<DecoderBlock>,
    hyper: Mlp,
    pub dim: usize,
}

impl MaskDecoder {
    pub fn register<T: Scalar, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, dim: usize) -> Result<Self> {
        let part = Partition::Head;
        let out_token = store.add("decoder.out_token", part, init::normal(rng, &[1, dim], 0.02))?;
        let mut blocks = Vec::with_capacity(DECODER_BLOCKS);
        for b in 0..DECODER_BLOCKS {
            let p = format!("decoder.block{b}");
            blocks.push(DecoderBlock {
                norm_t1: Norm::register(store, &format!("{p}.norm_t1"), part, dim)?,
                token_to_feature: Attention::register(store, rng, &format!("{p}.t2f"), part, dim, 1)?,
                norm_f: Norm::register(store, &format!("{p}.norm_f"), part, dim)?,
                feature_to_token: Attention::register(store, rng, &format!("{p}.f2t"), part, dim, 1)?,
                norm_t2: Norm::register(store, &format!("{p}.norm_t2"), part, dim)?,
                mlp: Mlp::register(store, rng, &format!("{p}.mlp"), part, (dim, 2 * dim, dim))?,
            });
            // start the cross-attention as plain similarity between tokens and pixel features
            let b = blocks.last().expect("just pushed");
            b.token_to_feature.identity_qk(store);
            b.feature_to_token.identity_qk(store);
        }
        let fc1 = Linear::register(store, rng, "decoder.hyper.fc1", part, dim, dim)?;
        let fc2 = Linear::register_small(store, rng, "decoder.hyper.fc2", part, dim, dim, 0.1)?;
        Ok(Self { out_token, blocks, hyper: Mlp { fc1, fc2 }, dim })
    }

    /// Mask logits `[rows·cols]` for features `[rows·cols, d]` and one prompt token `[1, d]`.
    ///
    /// Feature keys and queries carry the grid's positional code and token queries carry the
    /// initial tokens, so the prompt can find its own location in the grid.
    pub fn decode<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        features: Var,
        prompt: Var,
        rows: usize,
        cols: usize,
    ) -> Result<Var> {
        let fshape = g.value(features).shape().to_vec();
        if fshape != [rows * cols, self.dim] || g.value(prompt).shape() != [1, self.dim] {
            return Err(Error::shape(format!(
                "decoder: features {fshape:?} for a {rows}x{cols} grid, prompt {:?}, dim {}",
                g.value(prompt).shape(),
                self.dim
            )));
        }
        let pe = g.input(Tensor::from_f64(&[rows * cols, self.dim], &grid_encoding(rows, cols, self.dim)?)?);
        let out = g.param(store, self.out_token);
        let t0 = g.concat_rows(&[out, prompt])?;
        let mut t = t0;
        let mut f = features;
        for b in &self.blocks {
            let n = b.norm_t1.forward(g, store, t)?;
            let q = g.add(n, t0)?;
            let k = g.add(f, pe)?;
            let a = b.token_to_feature.forward_kv(g, store, q, k, f)?;
            t = g.add(t, a)?;
            let n = b.norm_f.forward(g, store, f)?;
            let q = g.add(n, pe)?;
            let k = g.add(t, t0)?;
            let a = b.feature_to_token.forward_kv(g, store, q, k, t)?;
            f = g.add(f, a)?;
            let n = b.norm_t2.forward(g, store, t)?;
            let a = b.mlp.forward(g, store, n)?;
            t = g.add(t, a)?;
        }
        let tok = g.slice_rows(t, 0, 1)?;
        let hyper = self.hyper.forward(g, store, tok)?;
        let ht = g.transpose(hyper)?;
        let logits = g.matmul(f, ht)?;
        g.reshape(logits, &[rows * cols])
    }
}

/// Mask logits on the token grid.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictedMask {
    pub rows: usize,
    pub cols: usize,
    pub logits: Vec<f32>,
}

impl PredictedMask {
    /// Bilinear resampling to `height × width` using pixel-center alignment.
    pub fn upsample(&self, height: usize, width: usize) -> Vec<f32> {
        let sample = |pos: usize, out: usize, inp: usize| -> (usize, usize, f32) {
            let s = ((pos as f64 + 0.5) * inp as f64 / out as f64 - 0.5).max(0.0);
            let lo = (s.floor() as usize).min(inp - 1);
            let hi = (lo + 1).min(inp - 1);
            (lo, hi, (s - lo as f64).min(1.0) as f32)
        };
        let mut out = Vec::with_capacity(height * width);
        for r in 0..height {
            let (r0, r1, fr) = sample(r, height, self.rows);
            for c in 0..width {
                let (c0, c1, fc) = sample(c, width, self.cols);
                let at = |rr: usize, cc: usize| self.logits[rr * self.cols + cc];
                let top = at(r0, c0) * (1.0 - fc) + at(r0, c1) * fc;
                let bot = at(r1, c0) * (1.0 - fc) + at(r1, c1) * fc;
                out.push(top * (1.0 - fr) + bot * fr);
            }
        }
        out
    }
}

/// Token-resolution target: a cell is set iff more than half of its `p × p` block is set.
pub fn downsample_target(mask: &InstanceMask, p: usize) -> Result<Vec<bool>> {
    let (h, w) = (mask.height, mask.width);
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::NotDivisible { height: h, width: w, patch: p });
    }
    let (rows, cols) = (h / p, w / p);
    let mut out = Vec::with_capacity(rows * cols);
    for br in 0..rows {
        for bc in 0..cols {
            let mut set = 0;
            for r in br * p..(br + 1) * p {
                set += mask.bits[r * w + bc * p..r * w + (bc + 1) * p].iter().filter(|&&b| b).count();
            }
            out.push(2 * set > p * p);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, DEFAULT_EPS};
    use crate::pseudolabel::SourceTag;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn encoding_deterministic_and_distinct() {
        let a = positional_encoding(Prompt { row: 3, col: 5 }, 16, 16, 32).unwrap();
        let b = positional_encoding(Prompt { row: 3, col: 5 }, 16, 16, 32).unwrap();
        assert_eq!(a, b);
        for r in 0..16 {
            for c in 0..16 {
                if (r, c) != (3, 5) {
                    assert_ne!(positional_encoding(Prompt { row: r, col: c }, 16, 16, 32).unwrap(), a);
                }
            }
        }
        assert!(positional_encoding(Prompt { row: 16, col: 0 }, 16, 16, 32).is_err());
    }

    #[test]
    fn zero_foreground_gives_pure_encoding() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let enc = PromptEncoder::register(&mut store, &mut rng, 8).unwrap();
        store.get_mut(enc.fg).data_mut().fill(0.0);
        let mut g = Graph::new();
        let p = Prompt { row: 1, col: 2 };
        let t = enc.encode(&mut g, &store, p, 4, 4).unwrap();
        assert_eq!(g.value(t).data(), positional_encoding(p, 4, 4, 8).unwrap().as_slice());
    }

    fn setup(dim: usize) -> (ParamStore<f64>, PromptEncoder, MaskDecoder, Tensor<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let enc = PromptEncoder::register(&mut store, &mut rng, dim).unwrap();
        let dec = MaskDecoder::register(&mut store, &mut rng, dim).unwrap();
        let feats = init::normal(&mut rng, &[4, dim], 1.0);
        (store, enc, dec, feats)
    }

    #[test]
    fn logits_shape_and_prompt_dependence() {
        let (store, enc, dec, feats) = setup(8);
        let run = |p: Prompt| {
            let mut g = Graph::new();
            let f = g.input(feats.clone());
            let t = enc.encode(&mut g, &store, p, 16, 16).unwrap();
            let l = dec.decode(&mut g, &store, f, t, 2, 2).unwrap();
            g.value(l).clone()
        };
        let a = run(Prompt { row: 0, col: 0 });
        let b = run(Prompt { row: 9, col: 12 });
        assert_eq!(a.shape(), &[4]);
        assert_ne!(a, b);
    }

    #[test]
    fn decoder_gradients_match_finite_differences() {
        let (store, enc, dec, feats) = setup(8);
        let ids: Vec<ParamId> = store.ids().collect();
        let report = grad_check(
            |g, s| {
                let f = g.input(feats.clone());
                let t = enc.encode(g, s, Prompt { row: 1, col: 1 }, 2, 2)?;
                let l = dec.decode(g, s, f, t, 2, 2)?;
                let sq = g.mul(l, l)?;
                let l2 = g.sigmoid(l);
                let a = g.add(sq, l2)?;
                Ok(g.sum_all(a))
            },
            &store,
            &ids,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }

    #[test]
    fn downsample_rules() {
        let all = InstanceMask::new(16, 16, vec![true; 256], 0.5, SourceTag::Rgb, 0).unwrap();
        assert!(downsample_target(&all, 8).unwrap().iter().all(|&b| b));

        let half: Vec<bool> = (0..64).map(|i| i < 32).collect();
        let m = InstanceMask::new(8, 8, half, 0.5, SourceTag::Rgb, 0).unwrap();
        assert_eq!(downsample_target(&m, 8).unwrap(), vec![false]);

        let checker: Vec<bool> = (0..256).map(|i| (i / 16 + i % 16) % 2 == 0).collect();
        let m = InstanceMask::new(16, 16, checker, 0.5, SourceTag::Rgb, 0).unwrap();
        assert!(downsample_target(&m, 8).unwrap().iter().all(|&b| !b));
        assert!(downsample_target(&m, 3).is_err());
    }

    #[test]
    fn upsample_constant_and_corners() {
        let pm = PredictedMask { rows: 2, cols: 2, logits: vec![1.0, 1.0, 1.0, 1.0] };
        assert!(pm.upsample(8, 8).iter().all(|&v| (v - 1.0).abs() < 1e-6));
        let pm = PredictedMask { rows: 2, cols: 2, logits: vec![0.0, 1.0, 2.0, 3.0] };
        let up = pm.upsample(4, 4);
        assert_eq!(up[0], 0.0);
        assert_eq!(up[15], 3.0);
    }
}
