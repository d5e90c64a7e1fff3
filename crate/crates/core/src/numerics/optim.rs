use std::collections::HashMap;

use super::params::{ParamId, ParamStore, Partition};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

#[derive(Clone, Debug)]
struct Moments<T> {
    m: Tensor<T>,
    v: Tensor<T>,
    step: u64,
}

/// Adaptive moments with decoupled weight decay.
///
/// Parameters without a gradient in a given step are left untouched, moments included.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamConfig,
    state: HashMap<ParamId, Moments<T>>,
    steps: u64,
    trainable: Option<Vec<Partition>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, state: HashMap::new(), steps: 0, trainable: None }
    }

    /// Restricts updates to the given partitions; gradients for others are rejected.
    pub fn only(mut self, partitions: &[Partition]) -> Self {
        self.trainable = Some(partitions.to_vec());
        self
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Tensor<T>)]) -> Result<()> {
        if store.is_frozen() {
            return Err(Error::FrozenParameters);
        }
        let c = self.config;
        for (id, g) in grads {
            if g.shape() != store.get(*id).shape() {
                return Err(Error::shape(format!(
                    "adam: grad {:?} for {} {:?}",
                    g.shape(),
                    store.name(*id),
                    store.get(*id).shape()
                )));
            }
            if let Some(parts) = &self.trainable {
                if !parts.contains(&store.partition(*id)) {
                    return Err(Error::FrozenParameters);
                }
            }
        }
        for (id, g) in grads {
            let p = store.get_mut(*id);
            let st = self.state.entry(*id).or_insert_with(|| Moments {
                m: Tensor::zeros(p.shape()),
                v: Tensor::zeros(p.shape()),
                step: 0,
            });
            st.step += 1;
            let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
            let bc1 = T::of(1.0 - c.beta1.powi(st.step as i32));
            let bc2 = T::of(1.0 - c.beta2.powi(st.step as i32));
            let lr = T::of(c.lr);
            let decay = T::one() - T::of(c.lr * c.weight_decay);
            let eps = T::of(c.eps);
            let (m, v) = (st.m.data_mut(), st.v.data_mut());
            for (i, (w, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = b1 * m[i] + (T::one() - b1) * gv;
                v[i] = b2 * v[i] + (T::one() - b2) * gv * gv;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                *w = *w * decay - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        self.steps += 1;
        Ok(())
    }
}
