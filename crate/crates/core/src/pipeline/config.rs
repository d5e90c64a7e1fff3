use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use super::model::ModelConfig;
use crate::backbone::{EncoderConfig, ModelScale, TeacherConfig};
use crate::codec::read_file;
use crate::error::{Error, Result};
use crate::numerics::AdamConfig;
use crate::objectives::LossWeights;
use crate::pseudolabel::{FusionConfig, SourceTag};

/// Everything a run needs besides its data. Parsed from `key = value` text.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    /// Images whose gradients are averaged into one optimizer step.
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: AdamConfig,
    /// Linear learning-rate ramp over the first `warmup` steps.
    pub warmup: usize,
    /// Cosine decay of the learning rate to zero after the warmup.
    pub cosine: bool,
    /// Global gradient-norm bound; 0 disables clipping.
    pub grad_clip: f64,
    pub loss: LossWeights,
    pub scale: ModelScale,
    /// Overrides of the scale's encoder shape, mainly for tiny test models.
    pub depth: Option<usize>,
    pub dim: Option<usize>,
    pub heads: Option<usize>,
    pub patch: usize,
    pub pos_grid: usize,
    pub d_f: usize,
    pub d_t: usize,
    pub fusion: FusionConfig,
    pub sources: Vec<SourceTag>,
    pub use_pseudo_masks: bool,
    pub use_distillation: bool,
    pub teacher_seed: u64,
    pub teacher_scale: f32,
    pub adapt_steps: usize,
    pub adapt_lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let teacher = TeacherConfig::default();
        Self {
            steps: 300,
            batch_size: 1,
            seed: 0,
            optimizer: AdamConfig { lr: 3e-3, ..AdamConfig::default() },
            warmup: 20,
            cosine: true,
            grad_clip: 1.0,
            loss: LossWeights::default(),
            scale: ModelScale::Small,
            depth: None,
            dim: None,
            heads: None,
            patch: 8,
            pos_grid: 16,
            d_f: 64,
            d_t: teacher.dim,
            fusion: FusionConfig::default(),
            sources: vec![SourceTag::Rgb, SourceTag::Seq, SourceTag::Material],
            use_pseudo_masks: true,
            use_distillation: true,
            teacher_seed: teacher.seed,
            teacher_scale: teacher.output_scale,
            adapt_steps: 200,
            adapt_lr: 0.1,
        }
    }
}

fn parse<T: FromStr>(line: usize, key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config { line, message: format!("bad value {value:?} for {key}") })
}

fn parse_bool(line: usize, key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::Config { line, message: format!("bad boolean {value:?} for {key}") }),
    }
}

pub fn parse_sources(value: &str) -> Result<Vec<SourceTag>> {
    let mut out = Vec::new();
    for part in value.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let tag = SourceTag::parse(part).ok_or_else(|| Error::Invalid(format!("unknown mask source {part:?}")))?;
        if !out.contains(&tag) {
            out.push(tag);
        }
    }
    if out.is_empty() {
        return Err(Error::Invalid("no mask sources given".into()));
    }
    Ok(out)
}

impl TrainConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (key, value) = body
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::Config { line, message: format!("expected `key = value`, got {body:?}") })?;
            c.set(key, value).map_err(|e| match e {
                Error::Config { message, .. } => Error::Config { line, message },
                other => Error::Config { line, message: other.to_string() },
            })?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = read_file(path.as_ref())?;
        let text = String::from_utf8(bytes).map_err(|_| Error::Config { line: 0, message: "not UTF-8".into() })?;
        Self::from_text(&text)
    }

    /// Sets one key. Unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let l = 0;
        match key {
            "steps" => self.steps = parse(l, key, value)?,
            "batch_size" => self.batch_size = parse(l, key, value)?,
            "seed" => self.seed = parse(l, key, value)?,
            "lr" => self.optimizer.lr = parse(l, key, value)?,
            "beta1" => self.optimizer.beta1 = parse(l, key, value)?,
            "beta2" => self.optimizer.beta2 = parse(l, key, value)?,
            "adam_eps" => self.optimizer.eps = parse(l, key, value)?,
            "weight_decay" => self.optimizer.weight_decay = parse(l, key, value)?,
            "warmup" => self.warmup = parse(l, key, value)?,
            "cosine" => self.cosine = parse_bool(l, key, value)?,
            "grad_clip" => self.grad_clip = parse(l, key, value)?,
            "w_focal" => self.loss.w_focal = parse(l, key, value)?,
            "w_dice" => self.loss.w_dice = parse(l, key, value)?,
            "w_mse" => self.loss.w_mse = parse(l, key, value)?,
            "lambda_dis" => self.loss.lambda_dis = parse(l, key, value)?,
            "focal_alpha" => self.loss.focal_alpha = parse(l, key, value)?,
            "focal_gamma" => self.loss.focal_gamma = parse(l, key, value)?,
            "temperature" => self.loss.temperature = parse(l, key, value)?,
            "scale" => self.scale = value.parse()?,
            "depth" => self.depth = Some(parse(l, key, value)?),
            "dim" => self.dim = Some(parse(l, key, value)?),
            "heads" => self.heads = Some(parse(l, key, value)?),
            "patch" => self.patch = parse(l, key, value)?,
            "pos_grid" => self.pos_grid = parse(l, key, value)?,
            "d_f" => self.d_f = parse(l, key, value)?,
            "d_t" => self.d_t = parse(l, key, value)?,
            "tau" => self.fusion.tau = parse(l, key, value)?,
            "r_max" => self.fusion.r_max = parse(l, key, value)?,
            "min_area" => self.fusion.min_area = parse(l, key, value)?,
            "sources" => self.sources = parse_sources(value)?,
            "use_pseudo_masks" => self.use_pseudo_masks = parse_bool(l, key, value)?,
            "use_distillation" => self.use_distillation = parse_bool(l, key, value)?,
            "teacher_seed" => self.teacher_seed = parse(l, key, value)?,
            "teacher_scale" => self.teacher_scale = parse(l, key, value)?,
            "adapt_steps" => self.adapt_steps = parse(l, key, value)?,
            "adapt_lr" => self.adapt_lr = parse(l, key, value)?,
            _ => return Err(Error::Config { line: l, message: format!("unknown key {key:?}") }),
        }
        Ok(())
    }

    pub fn encoder(&self) -> EncoderConfig {
        let mut e = EncoderConfig::scale(self.scale);
        e.pos_grid = self.pos_grid;
        if let Some(d) = self.depth {
            e.depth = d;
        }
        if let Some(d) = self.dim {
            e.dim = d;
            e.heads = (d / 32).max(1);
        }
        if let Some(h) = self.heads {
            e.heads = h;
        }
        e
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig { patch: self.patch, encoder: self.encoder(), d_f: self.d_f, d_t: self.d_t }
    }

    pub fn teacher(&self) -> TeacherConfig {
        TeacherConfig {
            patch: self.patch,
            dim: self.d_t,
            pos_grid: self.pos_grid,
            output_scale: self.teacher_scale,
            seed: self.teacher_seed,
            ..TeacherConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Invalid("steps and batch_size must be at least 1".into()));
        }
        if self.patch == 0 || self.d_f == 0 || self.d_t == 0 || self.d_f % 4 != 0 {
            return Err(Error::Invalid(format!(
                "patch {} and d_t {} must be positive, d_f {} a positive multiple of 4",
                self.patch, self.d_t, self.d_f
            )));
        }
        if !(self.optimizer.lr > 0.0 && self.adapt_lr > 0.0) {
            return Err(Error::Invalid("learning rates must be positive".into()));
        }
        if !(self.grad_clip >= 0.0 && self.grad_clip.is_finite()) {
            return Err(Error::Invalid(format!("grad_clip {} must be finite and non-negative", self.grad_clip)));
        }
        self.encoder().validate()?;
        self.loss.validate()?;
        self.fusion.validate()
    }

    /// Fails when both objectives are switched off: there is nothing to pre-train.
    /// Learning rate of optimizer step `step` (1-based).
    pub fn lr_at(&self, step: usize) -> f64 {
        let base = self.optimizer.lr;
        if step <= self.warmup {
            return base * step as f64 / self.warmup as f64;
        }
        if !self.cosine {
            return base;
        }
        let span = (self.steps - self.warmup.min(self.steps)).max(1) as f64;
        let t = (step - self.warmup - 1) as f64 / span;
        0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
    }

    pub fn check_objective(&self) -> Result<()> {
        if !self.use_pseudo_masks && !self.use_distillation {
            return Err(Error::NoObjective);
        }
        Ok(())
    }

    /// Resolved configuration in the same `key = value` form `from_text` reads.
    pub fn to_text(&self) -> String {
        let e = self.encoder();
        let sources: Vec<&str> = self
            .sources
            .iter()
            .map(|s| match s {
                SourceTag::Rgb => "rgb",
                SourceTag::Seq => "seq",
                SourceTag::Material => "material",
                SourceTag::File => "file",
            })
            .collect();
        let mut s = String::new();
        let o = &self.optimizer;
        let l = &self.loss;
        let _ = writeln!(s, "steps = {}\nbatch_size = {}\nseed = {}", self.steps, self.batch_size, self.seed);
        let _ = writeln!(
            s,
            "lr = {}\nbeta1 = {}\nbeta2 = {}\nadam_eps = {}\nweight_decay = {}",
            o.lr, o.beta1, o.beta2, o.eps, o.weight_decay
        );
        let _ = writeln!(s, "warmup = {}\ncosine = {}\ngrad_clip = {}", self.warmup, self.cosine, self.grad_clip);
        let _ = writeln!(s, "w_focal = {}\nw_dice = {}\nw_mse = {}\nlambda_dis = {}", l.w_focal, l.w_dice, l.w_mse, l.lambda_dis);
        let _ = writeln!(s, "focal_alpha = {}\nfocal_gamma = {}\ntemperature = {}", l.focal_alpha, l.focal_gamma, l.temperature);
        let _ = writeln!(s, "scale = {}\ndepth = {}\ndim = {}\nheads = {}", self.scale.name(), e.depth, e.dim, e.heads);
        let _ = writeln!(s, "patch = {}\npos_grid = {}\nd_f = {}\nd_t = {}", self.patch, self.pos_grid, self.d_f, self.d_t);
        let _ = writeln!(s, "tau = {}\nr_max = {}\nmin_area = {}", self.fusion.tau, self.fusion.r_max, self.fusion.min_area);
        let _ = writeln!(s, "sources = {}", sources.join(","));
        let _ = writeln!(s, "use_pseudo_masks = {}\nuse_distillation = {}", self.use_pseudo_masks, self.use_distillation);
        let _ = writeln!(s, "teacher_seed = {}\nteacher_scale = {}", self.teacher_seed, self.teacher_scale);
        let _ = writeln!(s, "adapt_steps = {}\nadapt_lr = {}", self.adapt_steps, self.adapt_lr);
        s
    }
}
