//! Parameterized building blocks shared by the backbone and the CRF feature branch.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::{BatchStats, ParamId, ParamSet, Tape, Tensor, Var};

pub(crate) const NORM_EPS: f64 = 1e-5;
pub(crate) const NORM_MOMENTUM: f64 = 0.1;

/// Whether normalization uses batch statistics (and reports them) or running ones.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running-statistic refresh produced by a training-mode forward pass.
#[derive(Clone, Debug)]
pub struct StatUpdate<T> {
    mean_id: ParamId,
    var_id: ParamId,
    stats: BatchStats<T>,
}

/// Folds batch statistics into running averages (`momentum` weight on the new batch).
pub fn apply_stat_updates<T: Scalar>(params: &mut ParamSet<T>, updates: &[StatUpdate<T>]) {
    let mom = T::lit(NORM_MOMENTUM);
    for u in updates {
        for (r, &b) in params.get_mut(u.mean_id).data_mut().iter_mut().zip(&u.stats.mean) {
            *r = (T::one() - mom) * *r + mom * b;
        }
        for (r, &b) in params.get_mut(u.var_id).data_mut().iter_mut().zip(&u.stats.var) {
            *r = (T::one() - mom) * *r + mom * b;
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub pad: usize,
}

impl Conv {
    /// He-normal weights, zero bias.
    pub fn register<T: Scalar>(
        params: &mut ParamSet<T>,
        prefix: &str,
        inputs: usize,
        outputs: usize,
        kernel: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let fan_in = (inputs * kernel * kernel) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        let data = (0..outputs * inputs * kernel * kernel)
            .map(|_| T::lit(normal.sample(rng)))
            .collect();
        let weight = params.insert(
            format!("{prefix}.weight"),
            Tensor::new(vec![outputs, inputs, kernel, kernel], data)?.with_requires_grad(true),
        )?;
        let bias = params.insert(
            format!("{prefix}.bias"),
            Tensor::zeros(vec![outputs]).with_requires_grad(true),
        )?;
        Ok(Self {
            weight,
            bias,
            pad: kernel / 2,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, params: &ParamSet<T>, x: Var) -> Result<Var> {
        let w = tape.param(params, self.weight);
        let b = tape.param(params, self.bias);
        tape.conv2d(x, w, Some(b), self.pad)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl Norm {
    pub fn register<T: Scalar>(params: &mut ParamSet<T>, prefix: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: params.insert(
                format!("{prefix}.gamma"),
                Tensor::full(vec![channels], T::one()).with_requires_grad(true),
            )?,
            beta: params.insert(
                format!("{prefix}.beta"),
                Tensor::zeros(vec![channels]).with_requires_grad(true),
            )?,
            running_mean: params.insert(format!("{prefix}.running_mean"), Tensor::zeros(vec![channels]))?,
            running_var: params.insert(format!("{prefix}.running_var"), Tensor::full(vec![channels], T::one()))?,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &ParamSet<T>,
        x: Var,
        mode: Mode,
        updates: &mut Vec<StatUpdate<T>>,
    ) -> Result<Var> {
        let g = tape.param(params, self.gamma);
        let b = tape.param(params, self.beta);
        let eps = T::lit(NORM_EPS);
        match mode {
            Mode::Train => {
                let (y, stats) = tape.affine_norm_train(x, g, b, eps)?;
                updates.push(StatUpdate {
                    mean_id: self.running_mean,
                    var_id: self.running_var,
                    stats,
                });
                Ok(y)
            }
            Mode::Eval => {
                let mean = params.get(self.running_mean).data().to_vec();
                let var = params.get(self.running_var).data().to_vec();
                tape.affine_norm_eval(x, g, b, &mean, &var, eps)
            }
        }
    }
}
