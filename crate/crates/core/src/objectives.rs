//! Mask losses (focal, dice, squared error), token-distribution distillation and their sum.
//!
//! Every loss exists twice: as a plain `f64` function over slices, and as a graph builder that
//! produces the same value with gradients. The plain forms serve as oracles for the graph forms.

use crate::error::{Error, Result};
use crate::numerics::{Graph, Scalar, Tensor, Var};

pub const PT_FLOOR: f64 = 1e-7;
pub const DICE_EPS: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub w_focal: f64,
    pub w_dice: f64,
    pub w_mse: f64,
    pub lambda_dis: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    /// Softmax temperature applied to both sides of the distillation loss.
    pub temperature: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { w_focal: 20.0, w_dice: 1.0, w_mse: 1.0, lambda_dis: 1.0, focal_alpha: 0.25, focal_gamma: 2.0, temperature: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.w_focal, self.w_dice, self.w_mse, self.lambda_dis, self.focal_alpha, self.focal_gamma];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Invalid(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::Invalid(format!("temperature {} must be positive", self.temperature)));
        }
        if self.focal_alpha > 1.0 {
            return Err(Error::Invalid(format!("focal alpha {} above 1", self.focal_alpha)));
        }
        Ok(())
    }
}

fn check_len(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b || a == 0 {
        return Err(Error::shape(format!("{what}: {a} predictions vs {b} targets")));
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Mean over cells of `-α_t (1 - p_t)^γ ln p_t`.
pub fn focal_loss(logits: &[f64], target: &[bool], alpha: f64, gamma: f64) -> Result<f64> {
    check_len(logits.len(), target.len(), "focal")?;
    let mut sum = 0.0;
    for (&z, &t) in logits.iter().zip(target) {
        let p = sigmoid(z);
        let pt = (if t { p } else { 1.0 - p }).max(PT_FLOOR);
        let at = if t { alpha } else { 1.0 - alpha };
        sum += -at * (1.0 - pt).powf(gamma) * pt.ln();
    }
    Ok(sum / logits.len() as f64)
}

/// Mean binary cross-entropy of logits.
pub fn bce_loss(logits: &[f64], target: &[bool]) -> Result<f64> {
    check_len(logits.len(), target.len(), "bce")?;
    let sum: f64 = logits
        .iter()
        .zip(target)
        .map(|(&z, &t)| {
            let p = sigmoid(z);
            -(if t { p } else { 1.0 - p }).max(PT_FLOOR).ln()
        })
        .sum();
    Ok(sum / logits.len() as f64)
}

pub fn dice_loss(probs: &[f64], target: &[bool]) -> Result<f64> {
    check_len(probs.len(), target.len(), "dice")?;
    let (mut inter, mut sp, mut st) = (0.0, 0.0, 0.0);
    for (&p, &t) in probs.iter().zip(target) {
        let t = if t { 1.0 } else { 0.0 };
        inter += p * t;
        sp += p;
        st += t;
    }
    Ok(1.0 - (2.0 * inter + DICE_EPS) / (sp + st + DICE_EPS))
}

pub fn mse_loss(probs: &[f64], target: &[bool]) -> Result<f64> {
    check_len(probs.len(), target.len(), "mse")?;
    let sum: f64 = probs.iter().zip(target).map(|(&p, &t)| (p - if t { 1.0 } else { 0.0 }).powi(2)).sum();
    Ok(sum / probs.len() as f64)
}

/// Weighted per-mask terms, averaged over masks.
pub fn seg_loss(predictions: &[Vec<f64>], targets: &[Vec<bool>], w: &LossWeights) -> Result<f64> {
    if predictions.len() != targets.len() || predictions.is_empty() {
        return Err(Error::shape(format!("seg: {} predictions vs {} targets", predictions.len(), targets.len())));
    }
    let mut sum = 0.0;
    for (z, t) in predictions.iter().zip(targets) {
        let p: Vec<f64> = z.iter().map(|&v| sigmoid(v)).collect();
        sum += w.w_focal * focal_loss(z, t, w.focal_alpha, w.focal_gamma)?
            + w.w_dice * dice_loss(&p, t)?
            + w.w_mse * mse_loss(&p, t)?;
    }
    Ok(sum / predictions.len() as f64)
}

fn softmax_row(x: &[f64], temperature: f64) -> Vec<f64> {
    let m = x.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e: Vec<f64> = x.iter().map(|&v| ((v - m) / temperature).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `-(1/N) Σ_i softmax(teacher_i) · log softmax(student_i)` over `n` tokens of width `dim`,
/// where `student` is already projected to the teacher width.
pub fn distill_loss(student: &[f64], teacher: &[f64], dim: usize, temperature: f64) -> Result<f64> {
    if dim == 0 || student.len() != teacher.len() || student.is_empty() || student.len() % dim != 0 {
        return Err(Error::shape(format!("distill: {} student vs {} teacher values, dim {dim}", student.len(), teacher.len())));
    }
    let n = student.len() / dim;
    let mut sum = 0.0;
    for (s, t) in student.chunks(dim).zip(teacher.chunks(dim)) {
        let pt = softmax_row(t, temperature);
        let m = s.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m / temperature + s.iter().map(|&v| (v / temperature - m / temperature).exp()).sum::<f64>().ln();
        sum -= pt.iter().zip(s).map(|(&p, &v)| p * (v / temperature - lse)).sum::<f64>();
    }
    Ok(sum / n as f64)
}

/// Mean Shannon entropy of the teacher's per-token distributions: the floor of
/// [`distill_loss`].
pub fn teacher_entropy(teacher: &[f64], dim: usize, temperature: f64) -> f64 {
    let n = teacher.len() / dim;
    let sum: f64 = teacher
        .chunks(dim)
        .map(|t| softmax_row(t, temperature).iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum::<f64>())
        .sum();
    sum / n as f64
}

/// `l_seg + λ·l_dis`.
pub fn total_loss(l_seg: f64, l_dis: f64, lambda_dis: f64) -> Result<f64> {
    if !(l_seg.is_finite() && l_dis.is_finite() && lambda_dis.is_finite()) {
        return Err(Error::NonFiniteLoss { value: l_seg + lambda_dis * l_dis, context: "total".into() });
    }
    Ok(l_seg + lambda_dis * l_dis)
}

fn target_tensor<T: Scalar>(target: &[bool], positive: f64, negative: f64) -> Tensor<T> {
    let data = target.iter().map(|&t| T::of(if t { positive } else { negative })).collect();
    Tensor::new(vec![target.len()], data).expect("1-d")
}

fn check_graph_len<T: Scalar>(g: &Graph<T>, x: Var, target: &[bool], what: &str) -> Result<()> {
    if g.value(x).shape() != [target.len()] {
        return Err(Error::shape(format!("{what}: prediction {:?} vs {} targets", g.value(x).shape(), target.len())));
    }
    Ok(())
}

pub fn focal_term<T: Scalar>(g: &mut Graph<T>, logits: Var, target: &[bool], alpha: f64, gamma: f64) -> Result<Var> {
    check_graph_len(g, logits, target, "focal")?;
    // p_t = σ(±z) and 1 - p_t = σ(∓z), so confident logits lose no precision to 1 - p
    let sign = g.input(target_tensor(target, 1.0, -1.0));
    let y = g.mul(logits, sign)?;
    let pt = g.sigmoid(y);
    let pt = g.clamp_min(pt, PT_FLOOR);
    let log_pt = g.log(pt);
    let neg = g.scale(y, -1.0);
    let one_minus = g.sigmoid(neg);
    let modulator = g.pow(one_minus, gamma);
    let at = g.input(target_tensor(target, alpha, 1.0 - alpha));
    let w = g.mul(at, modulator)?;
    let l = g.mul(w, log_pt)?;
    let m = g.mean_all(l);
    Ok(g.scale(m, -1.0))
}

pub fn dice_term<T: Scalar>(g: &mut Graph<T>, probs: Var, target: &[bool]) -> Result<Var> {
    check_graph_len(g, probs, target, "dice")?;
    let t = g.input(target_tensor(target, 1.0, 0.0));
    let inter = g.mul(probs, t)?;
    let inter = g.sum_all(inter);
    let num = g.scale(inter, 2.0);
    let num = g.add_scalar(num, DICE_EPS);
    let sp = g.sum_all(probs);
    let st = target.iter().filter(|&&b| b).count() as f64;
    let den = g.add_scalar(sp, st + DICE_EPS);
    let ratio = g.div(num, den)?;
    let neg = g.scale(ratio, -1.0);
    Ok(g.add_scalar(neg, 1.0))
}

pub fn mse_term<T: Scalar>(g: &mut Graph<T>, probs: Var, target: &[bool]) -> Result<Var> {
    check_graph_len(g, probs, target, "mse")?;
    let t = g.input(target_tensor(target, 1.0, 0.0));
    let d = g.sub(probs, t)?;
    let sq = g.mul(d, d)?;
    Ok(g.mean_all(sq))
}

/// Graph handles of the segmentation loss and its unweighted per-term means.
#[derive(Clone, Copy, Debug)]
pub struct SegTerms {
    pub total: Var,
    pub focal: Var,
    pub dice: Var,
    pub mse: Var,
}

/// Mean over masks of `w_f·focal + w_d·dice + w_m·mse`, each mask given as logits `[n]`.
pub fn seg_term<T: Scalar>(g: &mut Graph<T>, logits: &[Var], targets: &[Vec<bool>], w: &LossWeights) -> Result<SegTerms> {
    if logits.len() != targets.len() || logits.is_empty() {
        return Err(Error::shape(format!("seg: {} predictions vs {} targets", logits.len(), targets.len())));
    }
    let mut per_mask = Vec::with_capacity(logits.len());
    let (mut fs, mut ds, mut ms) = (Vec::new(), Vec::new(), Vec::new());
    for (&z, t) in logits.iter().zip(targets) {
        let f = focal_term(g, z, t, w.focal_alpha, w.focal_gamma)?;
        let p = g.sigmoid(z);
        let d = dice_term(g, p, t)?;
        let m = mse_term(g, p, t)?;
        let fw = g.scale(f, w.w_focal);
        let dw = g.scale(d, w.w_dice);
        let mw = g.scale(m, w.w_mse);
        let s = g.add(fw, dw)?;
        per_mask.push(g.add(s, mw)?);
        fs.push(f);
        ds.push(d);
        ms.push(m);
    }
    let mean = |g: &mut Graph<T>, vs: &[Var]| -> Result<Var> {
        let cells = vs.iter().map(|&v| g.reshape(v, &[1, 1])).collect::<Result<Vec<_>>>()?;
        let stacked = g.concat_cols(&cells)?;
        Ok(g.mean_all(stacked))
    };
    Ok(SegTerms { total: mean(g, &per_mask)?, focal: mean(g, &fs)?, dice: mean(g, &ds)?, mse: mean(g, &ms)? })
}

/// Distillation cross-entropy for projected student logits `[n, d]` against constant teacher
/// features. The teacher enters as an input node, so no gradient is ever computed for it.
pub fn distill_term<T: Scalar>(g: &mut Graph<T>, student: Var, teacher: &Tensor<T>, temperature: f64) -> Result<Var> {
    let shape = g.value(student).shape().to_vec();
    if shape.len() != 2 || shape != teacher.shape() || shape[0] == 0 {
        return Err(Error::shape(format!("distill: student {shape:?} vs teacher {:?}", teacher.shape())));
    }
    let inv = 1.0 / temperature;
    let t = g.input(teacher.clone());
    let t = g.scale(t, inv);
    let pt = g.softmax(t, 1)?;
    debug_assert!(!g.requires_grad(pt));
    let s = g.scale(student, inv);
    let ls = g.log_softmax(s, 1)?;
    let prod = g.mul(pt, ls)?;
    let sum = g.sum_all(prod);
    Ok(g.scale(sum, -1.0 / shape[0] as f64))
}

pub fn total_term<T: Scalar>(g: &mut Graph<T>, seg: Option<Var>, dis: Option<Var>, lambda_dis: f64) -> Result<Var> {
    match (seg, dis) {
        (Some(s), Some(d)) => {
            let d = g.scale(d, lambda_dis);
            g.add(s, d)
        }
        (Some(s), None) => Ok(s),
        (None, Some(d)) => Ok(g.scale(d, lambda_dis)),
        (None, None) => Err(Error::NoObjective),
    }
}

/// Scalar values of one training step's losses.
#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize)]
pub struct LossReport {
    pub l_seg: f64,
    pub l_dis: f64,
    pub l_total: f64,
    pub focal: f64,
    pub dice: f64,
    pub mse: f64,
}
