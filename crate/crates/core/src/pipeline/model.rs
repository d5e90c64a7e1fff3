use rand::{Rng, SeedableRng};

use super::checkpoint::Checkpoint;
use crate::backbone::{Encoder, EncoderConfig, FeatureMap, Neck};
use crate::decoder::{MaskDecoder, Prompt, PromptEncoder};
use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::numerics::{init, Graph, ParamId, ParamStore, Partition, Scalar, Tensor, Var};
use crate::objectives::{distill_term, seg_term, total_term, LossWeights, SegTerms};
use crate::spectral_embed::{BranchInputs, WavelengthDictionary};

/// Shape of the whole student model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub patch: usize,
    pub encoder: EncoderConfig,
    pub d_f: usize,
    pub d_t: usize,
}

impl ModelConfig {
    fn meta(&self) -> Vec<(&'static str, f32)> {
        let e = &self.encoder;
        [
            ("patch", self.patch),
            ("depth", e.depth),
            ("dim", e.dim),
            ("heads", e.heads),
            ("mlp_ratio", e.mlp_ratio),
            ("pos_grid", e.pos_grid),
            ("d_f", self.d_f),
            ("d_t", self.d_t),
        ]
        .into_iter()
        .map(|(k, v)| (k, v as f32))
        .collect()
    }

    fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let encoder = EncoderConfig {
            depth: c.meta_usize("depth")?,
            dim: c.meta_usize("dim")?,
            heads: c.meta_usize("heads")?,
            mlp_ratio: c.meta_usize("mlp_ratio")?,
            pos_grid: c.meta_usize("pos_grid")?,
        };
        encoder.validate()?;
        Ok(Self { patch: c.meta_usize("patch")?, encoder, d_f: c.meta_usize("d_f")?, d_t: c.meta_usize("d_t")? })
    }
}

/// The K-class linear head used for adaptation, `probe.weight [d_F, K]` and `probe.bias [K]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Probe {
    pub weight: ParamId,
    pub bias: ParamId,
    pub classes: usize,
}

impl Probe {
    pub fn register<T: Scalar, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, d_f: usize, classes: usize) -> Result<Self> {
        let weight = store.add("probe.weight", Partition::Head, init::xavier(rng, d_f, classes))?;
        let bias = store.add("probe.bias", Partition::Head, Tensor::zeros(&[classes]))?;
        Ok(Self { weight, bias, classes })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, features: Var) -> Result<Var> {
        crate::numerics::linear(g, store, features, self.weight, self.bias)
    }

    pub fn parameter_count<T: Scalar>(&self, store: &ParamStore<T>) -> usize {
        store.get(self.weight).len() + store.get(self.bias).len()
    }
}

/// One pre-training example with everything that does not depend on the weights precomputed.
#[derive(Clone, Debug)]
pub struct Sample {
    pub name: String,
    pub inputs: BranchInputs,
    /// Prompt and token-resolution target for every fused part; empty without pseudo-masks.
    pub parts: Vec<(Prompt, Vec<bool>)>,
    pub teacher: Option<FeatureMap>,
}

/// Loss nodes of one example.
#[derive(Clone, Copy, Debug)]
pub struct StepLoss {
    pub total: Var,
    pub seg: Option<SegTerms>,
    pub dis: Option<Var>,
}

/// Dictionary, encoder and neck (the backbone) plus prompt encoder, mask decoder and the
/// distillation projection (head).
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub dictionary: WavelengthDictionary,
    pub encoder: Encoder,
    pub neck: Neck,
    pub prompt: PromptEncoder,
    pub decoder: MaskDecoder,
    distill: Linear,
}

impl Model {
    pub fn build<T: Scalar, R: Rng>(config: ModelConfig, rng: &mut R) -> Result<(Self, ParamStore<T>)> {
        config.encoder.validate()?;
        if config.patch == 0 || config.d_t == 0 {
            return Err(Error::Invalid("patch and teacher dim must be positive".into()));
        }
        let mut store = ParamStore::new();
        let j = config.encoder.dim;
        let dictionary = WavelengthDictionary::register(&mut store, rng, config.patch, j)?;
        let encoder = Encoder::register(&mut store, rng, "encoder", Partition::Backbone, config.encoder)?;
        let neck = Neck::register(&mut store, rng, j, config.d_f)?;
        let prompt = PromptEncoder::register(&mut store, rng, config.d_f)?;
        let decoder = MaskDecoder::register(&mut store, rng, config.d_f)?;
        let distill = Linear::register(&mut store, rng, "distill.proj", Partition::Head, j, config.d_t)?;
        Ok((Self { config, dictionary, encoder, neck, prompt, decoder, distill }, store))
    }

    /// Rebuilds the model described by a checkpoint's meta entries and loads its weights.
    /// Returns the probe too when the checkpoint carries one.
    pub fn from_checkpoint(c: &Checkpoint) -> Result<(Self, ParamStore<f32>, Option<Probe>)> {
        let config = ModelConfig::from_checkpoint(c)?;
        // the init values are overwritten, any generator will do
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let (model, mut store) = Model::build::<f32, _>(config, &mut rng)?;
        let probe = match c.meta("classes") {
            Some(_) => Some(Probe::register(&mut store, &mut rng, config.d_f, c.meta_usize("classes")?)?),
            None => None,
        };
        c.load_into(&mut store)?;
        Ok((model, store, probe))
    }

    pub fn checkpoint(&self, store: &ParamStore<f32>, probe: Option<&Probe>) -> Result<Checkpoint> {
        let mut meta = self.config.meta();
        if let Some(p) = probe {
            meta.push(("classes", p.classes as f32));
        }
        Checkpoint::from_store(store, &meta)
    }

    /// Encoder output `D [n, j]` and neck output `F [n, d_F]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, inputs: &BranchInputs) -> Result<(Var, Var)> {
        let p = self.config.patch;
        let (rows, cols) = (inputs.height / p, inputs.width / p);
        let t = self.dictionary.embed(g, store, inputs)?;
        let d = self.encoder.encode(g, store, t, rows, cols)?;
        let f = self.neck.forward(g, store, d)?;
        Ok((d, f))
    }

    /// Token-grid mask logits `[n]` for one point prompt on an `height × width` image.
    pub fn mask_logits<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        features: Var,
        prompt: Prompt,
        height: usize,
        width: usize,
    ) -> Result<Var> {
        let p = self.config.patch;
        let pv = self.prompt.encode(g, store, prompt, height, width)?;
        self.decoder.decode(g, store, features, pv, height / p, width / p)
    }

    /// Backbone features projected to the teacher width, `[n, d_T]`.
    pub fn student<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, d: Var) -> Result<Var> {
        self.distill.forward(g, store, d)
    }

    /// `L_total` of one example. Segmentation needs parts, distillation needs teacher features;
    /// whichever is missing is left out.
    pub fn loss<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        sample: &Sample,
        weights: &LossWeights,
    ) -> Result<StepLoss> {
        let (h, w) = (sample.inputs.height, sample.inputs.width);
        let (d, f) = self.forward(g, store, &sample.inputs)?;
        let seg = if sample.parts.is_empty() {
            None
        } else {
            let mut logits = Vec::with_capacity(sample.parts.len());
            for (prompt, _) in &sample.parts {
                logits.push(self.mask_logits(g, store, f, *prompt, h, w)?);
            }
            let targets: Vec<Vec<bool>> = sample.parts.iter().map(|(_, t)| t.clone()).collect();
            Some(seg_term(g, &logits, &targets, weights)?)
        };
        let dis = match &sample.teacher {
            Some(fm) => {
                let s = self.student(g, store, d)?;
                Some(distill_term(g, s, &fm.to_tensor::<T>(), weights.temperature)?)
            }
            None => None,
        };
        let total = total_term(g, seg.map(|s| s.total), dis, weights.lambda_dis)?;
        Ok(StepLoss { total, seg, dis })
    }
}
