//! Parameterized building blocks shared by the encoder, teacher and mask decoder.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{init, layer_norm_affine, linear, Graph, ParamId, ParamStore, Partition, Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug)]
pub(crate) struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn register<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        partition: Partition,
        fan_in: usize,
        fan_out: usize,
    ) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), partition, init::xavier(rng, fan_in, fan_out))?;
        let bias = store.add(format!("{name}.bias"), partition, Tensor::zeros(&[fan_out]))?;
        Ok(Self { weight, bias: Some(bias) })
    }

    pub fn register_unbiased<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        partition: Partition,
        fan_in: usize,
        fan_out: usize,
    ) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), partition, init::xavier(rng, fan_in, fan_out))?;
        Ok(Self { weight, bias: None })
    }

    /// Same as [`Linear::register`] with the weight scaled down, so the layer starts near zero.
    pub fn register_small<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        partition: Partition,
        fan_in: usize,
        fan_out: usize,
        scale: f64,
    ) -> Result<Self> {
        let w: Tensor<T> = init::xavier(rng, fan_in, fan_out);
        let data = w.data().iter().map(|&v| v * T::of(scale)).collect();
        let weight = store.add(format!("{name}.weight"), partition, Tensor::new(vec![fan_in, fan_out], data)?)?;
        let bias = store.add(format!("{name}.bias"), partition, Tensor::zeros(&[fan_out]))?;
        Ok(Self { weight, bias: Some(bias) })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        match self.bias {
            Some(bias) => linear(g, store, x, self.weight, bias),
            None => {
                let w = g.param(store, self.weight);
                g.matmul(x, w)
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn register<T: Scalar>(store: &mut ParamStore<T>, name: &str, partition: Partition, dim: usize) -> Result<Self> {
        let gain = store.add(format!("{name}.gain"), partition, Tensor::full(&[dim], T::one()))?;
        let bias = store.add(format!("{name}.bias"), partition, Tensor::zeros(&[dim]))?;
        Ok(Self { gain, bias })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        layer_norm_affine(g, store, x, self.gain, self.bias)
    }
}

/// Two-layer perceptron with a GELU in between.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn register<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        partition: Partition,
        dims: (usize, usize, usize),
    ) -> Result<Self> {
        let fc1 = Linear::register(store, rng, &format!("{name}.fc1"), partition, dims.0, dims.1)?;
        let fc2 = Linear::register(store, rng, &format!("{name}.fc2"), partition, dims.1, dims.2)?;
        Ok(Self { fc1, fc2 })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, store, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, store, h)
    }
}

/// Multi-head scaled dot-product attention of `query[m, d]` rows over `context[n, d]` rows.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl Attention {
    pub fn register<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        partition: Partition,
        dim: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Invalid(format!("dim {dim} not divisible by {heads} heads")));
        }
        // a key bias shifts every score in a row equally, which softmax ignores
        let q = Linear::register(store, rng, &format!("{name}.q"), partition, dim, dim)?;
        let k = Linear::register_unbiased(store, rng, &format!("{name}.k"), partition, dim, dim)?;
        let v = Linear::register(store, rng, &format!("{name}.v"), partition, dim, dim)?;
        let o = Linear::register(store, rng, &format!("{name}.o"), partition, dim, dim)?;
        Ok(Self { q, k, v, o, heads, dim })
    }

    /// Sets the query and key projections to the identity, so scores start as plain dot
    /// products of the inputs.
    pub fn identity_qk<T: Scalar>(&self, store: &mut ParamStore<T>) {
        for lin in [self.q, self.k] {
            let w = store.get_mut(lin.weight);
            w.data_mut()
                .iter_mut()
                .enumerate()
                .for_each(|(i, x)| *x = if i / self.dim == i % self.dim { T::one() } else { T::zero() });
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, query: Var, context: Var) -> Result<Var> {
        self.forward_kv(g, store, query, context, context)
    }

    /// Attention whose keys and values come from different inputs of the same length, e.g. a
    /// value sequence and the same sequence with a positional code added.
    pub fn forward_kv<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        query: Var,
        keys: Var,
        values: Var,
    ) -> Result<Var> {
        let q = self.q.forward(g, store, query)?;
        let k = self.k.forward(g, store, keys)?;
        let v = self.v.forward(g, store, values)?;
        let hd = self.dim / self.heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (g.slice_cols(q, h * hd, hd)?, g.slice_cols(k, h * hd, hd)?, g.slice_cols(v, h * hd, hd)?)
            };
            let kt = g.transpose(kh)?;
            let s = g.matmul(qh, kt)?;
            let s = g.scale(s, scale);
            let a = g.softmax(s, 1)?;
            outs.push(g.matmul(a, vh)?);
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs)? };
        self.o.forward(g, store, cat)
    }
}
