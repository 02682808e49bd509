use super::{ParamId, ParamSet};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled (AdamW-style) weight-decay coefficient.
    pub weight_decay: f64,
    /// Learning-rate multiplier applied at every epoch boundary.
    pub lr_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            lr_decay: 0.95,
        }
    }
}

/// ADAM moment buffers for the parameters of one [`ParamSet`].
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    config: AdamConfig,
    lr: f64,
    step: u64,
    first: Vec<Option<Vec<T>>>,
    second: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        let lr = config.lr;
        Self {
            config,
            lr,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    /// Multiplies the learning rate by the decay factor.
    pub fn end_epoch(&mut self) {
        self.lr *= self.config.lr_decay;
    }

    /// One update of every listed parameter from its accumulated gradient.
    pub fn step(&mut self, params: &mut ParamSet<T>, ids: &[ParamId]) -> Result<()> {
        for &id in ids {
            if params.get(id).grad().is_none() {
                return Err(Error::MissingGrad(params.name(id).to_string()));
            }
        }
        self.step += 1;
        if self.first.len() < params.len() {
            self.first.resize(params.len(), None);
            self.second.resize(params.len(), None);
        }
        let c = &self.config;
        let t = self.step as i32;
        let b1 = T::lit(c.beta1);
        let b2 = T::lit(c.beta2);
        let bc1 = T::lit(1.0 - c.beta1.powi(t));
        let bc2 = T::lit(1.0 - c.beta2.powi(t));
        let lr = T::lit(self.lr);
        let eps = T::lit(c.eps);
        let decay = T::one() - T::lit(self.lr * c.weight_decay);
        for &id in ids {
            let tensor = params.get_mut(id);
            let n = tensor.len();
            let m = self.first[id.0].get_or_insert_with(|| vec![T::zero(); n]);
            let v = self.second[id.0].get_or_insert_with(|| vec![T::zero(); n]);
            let grad: Vec<T> = tensor.grad().expect("checked above").to_vec();
            let data = tensor.data_mut();
            for i in 0..n {
                let g = grad[i];
                m[i] = b1 * m[i] + (T::one() - b1) * g;
                v[i] = b2 * v[i] + (T::one() - b2) * g * g;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                data[i] = data[i] * decay - lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}
