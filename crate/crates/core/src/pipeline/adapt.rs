use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::metrics::{merge_confusion, MetricsReport};
use super::model::{Model, Probe};
use crate::cube::{center_crop_to_patch, HyperCube, LabelMap};
use crate::error::{Error, Result};
use crate::numerics::{AdamConfig, AdamW, Graph, ParamStore, Partition, Tensor};
use crate::spectral_embed::split_branches;

/// A cube with its per-pixel ground truth.
#[derive(Clone, Debug)]
pub struct LabeledCube {
    pub name: String,
    pub cube: HyperCube,
    pub labels: LabelMap,
}

/// Crops labels exactly as [`center_crop_to_patch`] crops cubes.
pub fn crop_labels(labels: &LabelMap, p: usize) -> Result<LabelMap> {
    let (h, w) = (labels.height, labels.width);
    if p == 0 || h < p || w < p {
        return Err(Error::TooSmall { height: h, width: w, patch: p });
    }
    let (oh, ow) = (h / p * p, w / p * p);
    let (top, left) = ((h - oh) / 2, (w - ow) / 2);
    let mut out = Vec::with_capacity(oh * ow);
    for r in top..top + oh {
        out.extend_from_slice(&labels.labels[r * w + left..r * w + left + ow]);
    }
    LabelMap::new(oh, ow, labels.classes, out)
}

/// Most frequent label in each `p × p` block; ties go to the smallest class.
pub fn block_majority(labels: &LabelMap, p: usize) -> Result<Vec<u16>> {
    let (h, w) = (labels.height, labels.width);
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::NotDivisible { height: h, width: w, patch: p });
    }
    let mut counts = vec![0usize; labels.classes];
    let mut out = Vec::with_capacity((h / p) * (w / p));
    for br in 0..h / p {
        for bc in 0..w / p {
            counts.iter_mut().for_each(|c| *c = 0);
            for r in br * p..(br + 1) * p {
                for &l in &labels.labels[r * w + bc * p..r * w + (bc + 1) * p] {
                    counts[l as usize] += 1;
                }
            }
            let best = (0..counts.len()).fold(0, |b, k| if counts[k] > counts[b] { k } else { b });
            out.push(best as u16);
        }
    }
    Ok(out)
}

/// Neck features `[n, d_F]` and block-majority labels of one cropped labeled cube.
fn token_data(model: &Model, frozen: &ParamStore<f32>, item: &LabeledCube) -> Result<(Tensor<f32>, Vec<u16>)> {
    let p = model.config.patch;
    if (item.cube.height(), item.cube.width()) != (item.labels.height, item.labels.width) {
        return Err(Error::shape(format!(
            "{}: cube {}x{} with labels {}x{}",
            item.name,
            item.cube.height(),
            item.cube.width(),
            item.labels.height,
            item.labels.width
        )));
    }
    let cube = center_crop_to_patch(&item.cube, p)?;
    let labels = block_majority(&crop_labels(&item.labels, p)?, p)?;
    let mut g = Graph::new();
    let (_, f) = model.forward(&mut g, frozen, &split_branches(&cube)?)?;
    Ok((g.value(f).clone(), labels))
}

fn frozen_copy(store: &ParamStore<f32>) -> ParamStore<f32> {
    let mut frozen = store.clone();
    frozen.freeze();
    frozen
}

fn class_count(data: &[LabeledCube]) -> Result<usize> {
    let first = data.first().ok_or_else(|| Error::EmptyDataset("no labeled cubes".into()))?;
    let k = first.labels.classes;
    if let Some(other) = data.iter().find(|d| d.labels.classes != k) {
        return Err(Error::ClassMismatch(format!("{} has {} classes, {} has {k}", other.name, other.labels.classes, first.name)));
    }
    Ok(k)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdaptConfig {
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    /// Expected class count; `None` takes it from the labels.
    pub classes: Option<usize>,
}

#[derive(Debug)]
pub struct Adapted {
    /// The input parameters plus a freshly trained probe.
    pub store: ParamStore<f32>,
    pub probe: Probe,
    /// Parameters the optimizer was allowed to change.
    pub trainable: usize,
    pub backbone_hash: [u8; 32],
    pub losses: Vec<f64>,
}

/// Trains a linear probe on frozen neck features with per-token cross-entropy.
///
/// Full-batch: all tokens of all images form one batch per step. Any probe already present in
/// `store` is replaced. Fails if a backbone tensor changed, which would be a bug.
pub fn adapt_head(model: &Model, store: &ParamStore<f32>, data: &[LabeledCube], config: &AdaptConfig) -> Result<Adapted> {
    let k = class_count(data)?;
    if let Some(expected) = config.classes {
        if expected != k {
            return Err(Error::ClassMismatch(format!("labels have {k} classes, expected {expected}")));
        }
    }
    if config.steps == 0 || !(config.lr > 0.0) {
        return Err(Error::Invalid("adaptation needs at least one step and a positive learning rate".into()));
    }
    let before = store.partition_hash(Partition::Backbone);
    let frozen = frozen_copy(store);
    let per_image = data.par_iter().map(|item| token_data(model, &frozen, item)).collect::<Result<Vec<_>>>()?;

    let d_f = model.config.d_f;
    let n: usize = per_image.iter().map(|(_, l)| l.len()).sum();
    let mut features = Vec::with_capacity(n * d_f);
    let mut onehot = vec![0f32; n * k];
    let mut row = 0;
    for (f, labels) in &per_image {
        features.extend_from_slice(f.data());
        for &l in labels {
            onehot[row * k + l as usize] = 1.0;
            row += 1;
        }
    }
    let features = Tensor::new(vec![n, d_f], features)?;
    let onehot = Tensor::new(vec![n, k], onehot)?;

    let mut head = ParamStore::new();
    for e in store.entries().iter().filter(|e| !e.name.starts_with("probe.")) {
        head.add(e.name.clone(), e.partition, e.value.clone())?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let probe = Probe::register(&mut head, &mut rng, d_f, k)?;
    let mut opt = AdamW::new(AdamConfig { lr: config.lr, ..AdamConfig::default() }).only(&[Partition::Head]);
    let mut losses = Vec::with_capacity(config.steps);
    for step in 1..=config.steps {
        let mut g = Graph::new();
        let x = g.input(features.clone());
        let y = g.input(onehot.clone());
        let logits = probe.forward(&mut g, &head, x)?;
        let ls = g.log_softmax(logits, 1)?;
        let picked = g.mul(ls, y)?;
        let sum = g.sum_all(picked);
        let loss = g.scale(sum, -1.0 / n as f64);
        let value = g.value(loss).item() as f64;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { value, context: format!("adaptation step {step}") });
        }
        losses.push(value);
        let grads = g.backward(loss)?.into_params();
        opt.step(&mut head, &grads)?;
    }
    log::info!("probe cross-entropy {:.4} -> {:.4}", losses[0], losses[losses.len() - 1]);

    if head.partition_hash(Partition::Backbone) != before {
        return Err(Error::Invalid("backbone tensors changed during adaptation".into()));
    }
    let trainable = probe.parameter_count(&head);
    Ok(Adapted { store: head, probe, trainable, backbone_hash: before, losses })
}

/// Per-token argmax class of the probe, on the cube cropped to the patch.
pub fn predict_tokens(model: &Model, store: &ParamStore<f32>, probe: &Probe, cube: &HyperCube) -> Result<Vec<u16>> {
    let cube = center_crop_to_patch(cube, model.config.patch)?;
    let mut g = Graph::new();
    let (_, f) = model.forward(&mut g, store, &split_branches(&cube)?)?;
    let logits = probe.forward(&mut g, store, f)?;
    let v = g.value(logits);
    Ok(v.data()
        .chunks(probe.classes)
        .map(|row| (0..row.len()).fold(0, |b, k| if row[k] > row[b] { k } else { b }) as u16)
        .collect())
}

/// Token-resolution confusion matrix over all images and the metrics derived from it.
pub fn evaluate_seg(model: &Model, store: &ParamStore<f32>, probe: &Probe, data: &[LabeledCube]) -> Result<MetricsReport> {
    let k = class_count(data)?;
    if k > probe.classes {
        return Err(Error::ClassMismatch(format!("labels have {k} classes, the probe {}", probe.classes)));
    }
    let frozen = frozen_copy(store);
    let p = model.config.patch;
    let parts = data
        .par_iter()
        .map(|item| -> Result<Vec<Vec<u64>>> {
            let labels = block_majority(&crop_labels(&item.labels, p)?, p)?;
            let pred = predict_tokens(model, &frozen, probe, &item.cube)?;
            let mut c = vec![vec![0u64; probe.classes]; probe.classes];
            for (&t, &y) in labels.iter().zip(&pred) {
                c[t as usize][y as usize] += 1;
            }
            Ok(c)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = vec![vec![0u64; probe.classes]; probe.classes];
    for c in &parts {
        merge_confusion(&mut total, c);
    }
    MetricsReport::from_confusion(total)
}
