use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::config::TrainConfig;
use super::model::{Model, Sample};
use crate::backbone::TeacherProvider;
use crate::cube::{center_crop_to_patch, rgb_projection, HyperCube};
use crate::decoder::downsample_target;
use crate::error::{Error, Result};
use crate::numerics::{AdamW, Graph, ParamId, ParamStore, Tensor};
use crate::pseudolabel::{decompose, PseudoLabeler};
use crate::spectral_embed::split_branches;

/// One line of the loss log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossRecord {
    pub step: usize,
    pub l_seg: f64,
    pub l_dis: f64,
    pub l_total: f64,
}

/// Line-delimited JSON, one record per step.
pub fn loss_log(records: &[LossRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("plain struct serializes"));
        out.push('\n');
    }
    out
}

/// Precomputes pseudo-targets and teacher features for every cube, cropped to the patch.
///
/// With a labeler, cubes whose mask pool is empty are skipped. Cubes are processed in parallel
/// on the current rayon pool; the output keeps input order.
pub fn prepare_samples(
    cubes: &[(String, HyperCube)],
    labeler: Option<&PseudoLabeler>,
    teacher: Option<&dyn TeacherProvider>,
    patch: usize,
) -> Result<Vec<Sample>> {
    let prepared: Vec<Option<Sample>> = cubes
        .par_iter()
        .map(|(name, cube)| -> Result<Option<Sample>> {
            let cube = center_crop_to_patch(cube, patch)?;
            let parts = match labeler {
                Some(l) => match l.target(name, &cube)? {
                    Some(t) => decompose(&t)
                        .into_iter()
                        .map(|(mask, prompt)| Ok((prompt, downsample_target(&mask, patch)?)))
                        .collect::<Result<Vec<_>>>()?,
                    None => {
                        log::debug!("{name}: empty mask pool, skipped");
                        return Ok(None);
                    }
                },
                None => Vec::new(),
            };
            let teacher = match teacher {
                Some(t) => Some(t.features(name, &rgb_projection(&cube)?)?),
                None => None,
            };
            Ok(Some(Sample { name: name.clone(), inputs: split_branches(&cube)?, parts, teacher }))
        })
        .collect::<Result<_>>()?;
    Ok(prepared.into_iter().flatten().collect())
}

#[derive(Debug)]
pub struct Pretrained {
    pub model: Model,
    pub store: ParamStore<f32>,
    pub log: Vec<LossRecord>,
}

/// Rescales all gradients together so their joint L2 norm is at most `bound`.
fn clip_global_norm(grads: &mut [(ParamId, Tensor<f32>)], bound: f64) {
    let norm = grads.iter().flat_map(|(_, g)| g.data()).map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
    if norm > bound {
        let k = (bound / norm) as f32;
        for (_, g) in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= k);
        }
    }
}

/// Builds a model from `config.seed` and trains it on the samples.
///
/// Every step draws `batch_size` images with replacement from the same generator that
/// initialized the model, averages their gradients and takes one AdamW step.
pub fn pretrain(samples: &[Sample], config: &TrainConfig) -> Result<Pretrained> {
    config.validate()?;
    config.check_objective()?;
    if samples.is_empty() {
        return Err(Error::EmptyDataset("no image has a usable training target".into()));
    }
    // samples may carry targets for an objective this run switches off
    let stripped: Vec<Sample>;
    let samples = if samples
        .iter()
        .any(|s| (!config.use_pseudo_masks && !s.parts.is_empty()) || (!config.use_distillation && s.teacher.is_some()))
    {
        stripped = samples
            .iter()
            .map(|s| Sample {
                parts: if config.use_pseudo_masks { s.parts.clone() } else { Vec::new() },
                teacher: if config.use_distillation { s.teacher.clone() } else { None },
                ..s.clone()
            })
            .collect();
        &stripped[..]
    } else {
        samples
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (model, mut store) = Model::build::<f32, _>(config.model(), &mut rng)?;
    let mut opt = AdamW::new(config.optimizer);
    let mut log = Vec::with_capacity(config.steps);
    let inv = 1.0 / config.batch_size as f64;
    for step in 1..=config.steps {
        let mut acc: Vec<Option<Tensor<f32>>> = vec![None; store.len()];
        let mut rec = LossRecord { step, l_seg: 0.0, l_dis: 0.0, l_total: 0.0 };
        for _ in 0..config.batch_size {
            let sample = &samples[rng.gen_range(0..samples.len())];
            let mut g = Graph::new();
            let loss = model.loss(&mut g, &store, sample, &config.loss)?;
            let total = g.value(loss.total).item() as f64;
            if !total.is_finite() {
                return Err(Error::NonFiniteLoss { value: total, context: format!("step {step}, image {}", sample.name) });
            }
            rec.l_total += total * inv;
            rec.l_seg += loss.seg.map_or(0.0, |s| g.value(s.total).item() as f64) * inv;
            rec.l_dis += loss.dis.map_or(0.0, |d| g.value(d).item() as f64) * inv;
            for (id, grad) in g.backward(loss.total)?.into_params() {
                match &mut acc[id.index()] {
                    Some(a) => a.data_mut().iter_mut().zip(grad.data()).for_each(|(x, &y)| *x += y),
                    slot => *slot = Some(grad),
                }
            }
        }
        let mut grads = Vec::new();
        for (id, slot) in store.ids().zip(acc) {
            if let Some(mut grad) = slot {
                if config.batch_size > 1 {
                    grad.data_mut().iter_mut().for_each(|x| *x *= inv as f32);
                }
                if !grad.all_finite() {
                    return Err(Error::NonFiniteLoss {
                        value: f64::NAN,
                        context: format!("gradient of {} at step {step}", store.name(id)),
                    });
                }
                grads.push((id, grad));
            }
        }
        if config.grad_clip > 0.0 {
            clip_global_norm(&mut grads, config.grad_clip);
        }
        opt.config.lr = config.lr_at(step);
        opt.step(&mut store, &grads)?;
        if step == 1 || step % 25 == 0 || step == config.steps {
            log::info!("step {step}: l_seg {:.4} l_dis {:.4} l_total {:.4}", rec.l_seg, rec.l_dis, rec.l_total);
        }
        log.push(rec);
    }
    Ok(Pretrained { model, store, log })
}
