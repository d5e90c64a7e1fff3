//! Finite-difference checks of every differentiable op group, run by `hypervision gradcheck`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::model::{Model, ModelConfig, Sample};
use crate::backbone::{EncoderConfig, FeatureMap, Stage};
use crate::decoder::Prompt;
use crate::error::Result;
use crate::numerics::{grad_check, GradReport, Graph, ParamId, ParamStore, Partition, Tensor, Var, DEFAULT_EPS};
use crate::objectives::{distill_term, seg_term, LossWeights};
use crate::spectral_embed::BranchInputs;

/// Largest relative error any group may show.
pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GroupReport {
    pub group: &'static str,
    pub report: GradReport,
}

impl GroupReport {
    pub fn passed(&self) -> bool {
        self.report.max_rel_err < GRAD_TOLERANCE
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape matches")
}

/// Reduces any tensor to a scalar through a fixed random weighting, so no gradient is uniform.
fn project(g: &mut Graph<f64>, x: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.value(x).shape().to_vec();
    let w = g.input(uniform(&mut rng, &shape, -1.0, 1.0));
    let y = g.mul(x, w)?;
    Ok(g.sum_all(y))
}

struct Case {
    store: ParamStore<f64>,
    ids: Vec<ParamId>,
}

impl Case {
    fn new(rng: &mut ChaCha8Rng, params: &[(&str, &[usize], f64, f64)]) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut ids = Vec::new();
        for (name, shape, lo, hi) in params {
            ids.push(store.add(*name, Partition::Head, uniform(rng, shape, *lo, *hi))?);
        }
        Ok(Self { store, ids })
    }

    fn check<F>(&self, f: F) -> Result<GradReport>
    where
        F: Fn(&mut Graph<f64>, &ParamStore<f64>, &[ParamId]) -> Result<Var>,
    {
        grad_check(|g, s| f(g, s, &self.ids), &self.store, &self.ids, DEFAULT_EPS)
    }
}

fn elementwise(rng: &mut ChaCha8Rng) -> Result<GradReport> {
    let case = Case::new(rng, &[("a", &[3, 4], 0.5, 1.5), ("b", &[3, 4], 0.5, 1.5)])?;
    case.check(|g, s, ids| {
        let (a, b) = (g.param(s, ids[0]), g.param(s, ids[1]));
        let sum = g.add(a, b)?;
        let diff = g.sub(a, b)?;
        let prod = g.mul(sum, diff)?;
        let quot = g.div(prod, b)?;
        let l = g.log(a);
        let p = g.pow(b, 1.5);
        let shifted = g.add_scalar(a, -1.0);
        let c = g.clamp_min(shifted, 0.1);
        let sg = g.sigmoid(diff);
        let ge = g.gelu(diff);
        let sc = g.scale(ge, 0.7);
        let mut acc = quot;
        for v in [l, p, c, sg, sc] {
            acc = g.add(acc, v)?;
        }
        project(g, acc, 1)
    })
}

fn broadcast(rng: &mut ChaCha8Rng) -> Result<GradReport> {
    let case = Case::new(rng, &[("x", &[3, 4], -1.0, 1.0), ("row", &[4], -1.0, 1.0), ("gain", &[4], 0.5, 1.5)])?;
    case.check(|g, s, ids| {
        let x = g.param(s, ids[0]);
        let r = g.param(s, ids[1]);
        let k = g.param(s, ids[2]);
        let y = g.add_row(x, r)?;
        let y = g.mul_row(y, k)?;
        project(g, y, 2)
    })
}

fn matmul(rng: &mut ChaCha8Rng) -> Result<GradReport> {
    let case = Case::new(rng, &[("a", &[3, 5], -1.0, 1.0), ("b", &[5, 4], -1.0, 1.0)])?;
    case.check(|g, s, ids| {
        let (a, b) = (g.param(s, ids[0]), g.param(s, ids[1]));
        let y = g.matmul(a, b)?;
        let t = g.transpose(y)?;
        let r = g.reshape(t, &[2, 6])?;
        project(g, r, 3)
    })
}

fn convolution(rng: &mut ChaCha8Rng) -> Result<GradReport> {
    let case = Case::new(rng, &[("x", &[1, 3, 8, 8], -1.0, 1.0), ("w0", &[4, 4, 4], -0.5, 0.5), ("w1", &[4, 4, 4], -0.5, 0.5)])?;
    case.check(|g, s, ids| {
        let x = g.param(s, ids[0]);
        let w0 = g.param(s, ids[1]);
        let w1 = g.param(s, ids[2]);
        // w0 fills two channel slots, as a shared wavelength bin does
        let w = g.stack_channels(&[w0, w1, w0])?;
        let y = g.conv2d(x, w, 4)?;
        project(g, y, 4)
    })
}

fn softmax(rng: &mut ChaCha8Rng) -> Result<GradReport> {
    let case = Case::new(rng, &[("z", &[3, 5], -2.0, 2.0)])?;
    case.check(|g, s, ids| {
        let z = g.param(s, ids[0]);
        let a = g.softmax(z, 1)?;
        let b = g.softmax(z, 0)?;
        let c = g.log_softmax(z, 1)?;
        let d = g.log_softmax(z, 0)?;
        let ab = g.add(a, b)?;
        let cd = g.add(c, d)?;
        let y = g.add(ab, cd)?;
        project(g, y, 5)
    })
}

fn layer_norm(rng: &mut ChaCha8Rng) -> Result<GradReport> {
    let case = Case::new(rng, &[("x", &[4, 6], -2.0, 2.0)])?;
    case.check(|g, s, ids| {
        let x = g.param(s, ids[0]);
        let y = g.layer_norm(x, 1e-5)?;
        project(g, y, 6)
    })
}

fn reductions(rng: &mut ChaCha8Rng) -> Result<GradReport> {
    let case = Case::new(rng, &[("x", &[3, 4], -1.0, 1.0)])?;
    case.check(|g, s, ids| {
        let x = g.param(s, ids[0]);
        let sq = g.mul(x, x)?;
        let r0 = g.sum_axis(sq, 0)?;
        let r1 = g.sum_axis(x, 1)?;
        let a = project(g, r0, 7)?;
        let b = project(g, r1, 8)?;
        let m = g.mean_all(sq);
        let t = g.sum_all(x);
        let ab = g.add(a, b)?;
        let mt = g.add(m, t)?;
        g.add(ab, mt)
    })
}

fn concat_slice(rng: &mut ChaCha8Rng) -> Result<GradReport> {
    let case = Case::new(rng, &[("a", &[2, 3], -1.0, 1.0), ("b", &[3, 3], -1.0, 1.0)])?;
    case.check(|g, s, ids| {
        let (a, b) = (g.param(s, ids[0]), g.param(s, ids[1]));
        let rows = g.concat_rows(&[a, b])?;
        let mid = g.slice_rows(rows, 1, 3)?;
        let cols = g.concat_cols(&[mid, b])?;
        let part = g.slice_cols(cols, 2, 3)?;
        let sq = g.mul(part, part)?;
        project(g, sq, 9)
    })
}

fn tiny_model_config() -> ModelConfig {
    ModelConfig { patch: 4, encoder: EncoderConfig { depth: 1, dim: 8, heads: 2, mlp_ratio: 2, pos_grid: 4 }, d_f: 8, d_t: 4 }
}

/// A 16×16×6 example with two prompted parts and random teacher features.
fn tiny_sample(rng: &mut ChaCha8Rng) -> Result<Sample> {
    let (h, w) = (16, 16);
    let wl: Vec<f32> = (0..6).map(|i| 480.0 + 45.0 * i as f32).collect();
    let data: Vec<f32> = (0..h * w * 6).map(|_| rng.gen()).collect();
    let inputs = BranchInputs::from_bands(h, w, &wl, &data)?;
    let t1: Vec<bool> = (0..16).map(|i| i % 4 < 2).collect();
    let t2: Vec<bool> = (0..16).map(|i| i >= 10).collect();
    let teacher: Vec<f32> = (0..16 * 4).map(|_| rng.gen_range(-2.0..2.0)).collect();
    Ok(Sample {
        name: "gradcheck".into(),
        inputs,
        parts: vec![(Prompt { row: 2, col: 3 }, t1), (Prompt { row: 13, col: 9 }, t2)],
        teacher: Some(FeatureMap::new(4, 4, 4, Stage::Teacher, teacher)?),
    })
}

/// Checks `f` against every parameter it touches.
fn check_model<F>(store: &ParamStore<f64>, f: F) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    f(&mut g, store)?;
    let params = g.referenced_params();
    grad_check(f, store, &params, DEFAULT_EPS)
}

fn model_groups(rng: &mut ChaCha8Rng) -> Result<Vec<GroupReport>> {
    let (model, store) = Model::build::<f64, _>(tiny_model_config(), rng)?;
    let sample = tiny_sample(rng)?;
    let inputs = &sample.inputs;
    let weights = LossWeights::default();
    let mut out = Vec::new();

    let embedding = check_model(&store, |g, s| {
        let t = model.dictionary.embed(g, s, inputs)?;
        project(g, t, 10)
    })?;
    out.push(GroupReport { group: "embedding", report: embedding });

    let encoder = check_model(&store, |g, s| {
        let (_, f) = model.forward(g, s, inputs)?;
        project(g, f, 11)
    })?;
    out.push(GroupReport { group: "encoder+neck", report: encoder });

    // decoder checked on fixed features so the group isolates the head
    let mut fg = Graph::new();
    let (_, f) = model.forward(&mut fg, &store, inputs)?;
    let features = fg.value(f).clone();
    let decoder = check_model(&store, |g, s| {
        let f = g.input(features.clone());
        let z = model.mask_logits(g, s, f, sample.parts[0].0, 16, 16)?;
        project(g, z, 12)
    })?;
    out.push(GroupReport { group: "prompt+decoder", report: decoder });

    let mut lrng = ChaCha8Rng::seed_from_u64(13);
    let case = Case::new(&mut lrng, &[("z1", &[16], -3.0, 3.0), ("z2", &[16], -3.0, 3.0), ("student", &[16, 4], -2.0, 2.0)])?;
    let targets: Vec<Vec<bool>> = sample.parts.iter().map(|(_, t)| t.clone()).collect();
    let teacher = sample.teacher.as_ref().expect("sample has teacher features").to_tensor::<f64>();
    let losses = case.check(|g, s, ids| {
        let z1 = g.param(s, ids[0]);
        let z2 = g.param(s, ids[1]);
        let st = g.param(s, ids[2]);
        let seg = seg_term(g, &[z1, z2], &targets, &weights)?;
        let dis = distill_term(g, st, &teacher, 1.5)?;
        g.add(seg.total, dis)
    })?;
    out.push(GroupReport { group: "losses", report: losses });

    let composite = check_model(&store, |g, s| Ok(model.loss(g, s, &sample, &weights)?.total))?;
    out.push(GroupReport { group: "composite", report: composite });
    Ok(out)
}

/// Runs every group in a fixed order from a fixed seed.
pub fn gradient_suite() -> Result<Vec<GroupReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x9dc4);
    let ops: [(&'static str, fn(&mut ChaCha8Rng) -> Result<GradReport>); 8] = [
        ("elementwise", elementwise),
        ("broadcast", broadcast),
        ("matmul+reshape", matmul),
        ("conv+stack", convolution),
        ("softmax", softmax),
        ("layer_norm", layer_norm),
        ("reductions", reductions),
        ("concat+slice", concat_slice),
    ];
    let mut out = Vec::new();
    for (group, f) in ops {
        out.push(GroupReport { group, report: f(&mut rng)? });
    }
    out.extend(model_groups(&mut rng)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_group_passes() {
        let groups = gradient_suite().unwrap();
        assert_eq!(groups.len(), 13);
        for g in &groups {
            assert!(g.report.coordinates > 0, "{}", g.group);
            assert!(g.passed(), "{}: {:?}", g.group, g.report);
        }
    }
}
