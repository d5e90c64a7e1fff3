use std::cmp::Ordering;

use super::mask::{iou, InstanceMask};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FusionConfig {
    /// IoU above which a lower-ranked mask is suppressed.
    pub tau: f64,
    pub r_max: usize,
    pub min_area: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { tau: 0.7, r_max: 16, min_area: 16 }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::Invalid(format!("tau {} outside (0, 1)", self.tau)));
        }
        if self.r_max == 0 {
            return Err(Error::Invalid("r_max must be at least 1".into()));
        }
        Ok(())
    }
}

/// Fused supervision for one image: retained parts and their pixel-wise OR.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoTarget {
    pub height: usize,
    pub width: usize,
    pub union: Vec<bool>,
    /// Retained masks in rank order; each keeps its source tag and id as provenance.
    pub parts: Vec<InstanceMask>,
    pub tau: f64,
}

/// Fusion rank: score desc, area desc, source priority, id asc.
pub fn rank_order(a: &InstanceMask, b: &InstanceMask) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| b.area().cmp(&a.area()))
        .then_with(|| a.source.cmp(&b.source))
        .then_with(|| a.id.cmp(&b.id))
}

/// Greedy suppression: walk masks in rank order, keep one if its IoU with every kept mask is
/// at most `tau`. Returns indices into `pool`. Equal-ranked masks keep pool order.
pub fn nms_indices(pool: &[InstanceMask], tau: f64, limit: usize) -> Result<Vec<usize>> {
    if let Some(first) = pool.first() {
        if let Some(m) = pool.iter().find(|m| (m.height, m.width) != (first.height, first.width)) {
            return Err(Error::shape(format!("pool mixes {}x{} and {}x{} masks", first.height, first.width, m.height, m.width)));
        }
    }
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.sort_by(|&i, &j| rank_order(&pool[i], &pool[j]));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.len() == limit {
            break;
        }
        let mut keep = true;
        for &k in &kept {
            if iou(&pool[i], &pool[k])? > tau {
                keep = false;
                break;
            }
        }
        if keep {
            kept.push(i);
        }
    }
    Ok(kept)
}

/// Global fusion of all candidate masks of one image.
pub fn nms_fuse(pool: &[InstanceMask], config: &FusionConfig) -> Result<PseudoTarget> {
    config.validate()?;
    let first = pool.first().ok_or(Error::EmptyPool)?;
    let (h, w) = (first.height, first.width);
    let kept = nms_indices(pool, config.tau, config.r_max)?;
    let parts: Vec<InstanceMask> = kept.into_iter().map(|i| pool[i].clone()).collect();
    let mut union = vec![false; h * w];
    for p in &parts {
        for (u, &b) in union.iter_mut().zip(&p.bits) {
            *u |= b;
        }
    }
    Ok(PseudoTarget { height: h, width: w, union, parts, tau: config.tau })
}
