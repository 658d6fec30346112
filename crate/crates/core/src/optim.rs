//! Bias-corrected Adam.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Named parameter tensors, iterated in name order.
pub type ParamMap = BTreeMap<String, Tensor>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl AdamConfig {
    /// Conditional-GAN defaults (`beta1 = 0.5`) at the given learning rate.
    pub fn with_lr(lr: f32) -> Self {
        Self {
            lr,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && self.beta1 > 0.0
            && self.beta1 < 1.0
            && self.beta2 > 0.0
            && self.beta2 < 1.0
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid Adam settings {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub first_moment: ParamMap,
    pub second_moment: ParamMap,
    pub step_count: u64,
    pub skipped_steps: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// A gradient held NaN or infinity; nothing was changed.
    SkippedNonFinite,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &ParamMap) -> Self {
        let zeros: ParamMap = params
            .iter()
            .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape().to_vec())))
            .collect();
        Self {
            config,
            first_moment: zeros.clone(),
            second_moment: zeros,
            step_count: 0,
            skipped_steps: 0,
        }
    }

    /// One Adam update. Parameters missing from `grads` are treated as having
    /// zero gradient (their moments still decay).
    pub fn step(&mut self, params: &mut ParamMap, grads: &ParamMap) -> Result<StepOutcome> {
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| Error::Unknown { what: "parameter", name: name.clone() })?;
            if p.shape() != g.shape() {
                return Err(Error::dim(
                    "adam_step",
                    format!("gradient for {name} has shape {:?}, parameter {:?}", g.shape(), p.shape()),
                ));
            }
        }
        if grads.values().any(|g| !g.is_finite()) {
            self.skipped_steps += 1;
            log::warn!(
                "adam: non-finite gradient, update skipped ({} skipped so far)",
                self.skipped_steps
            );
            return Ok(StepOutcome::SkippedNonFinite);
        }
        self.step_count += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step_count as i32;
        let bc1 = (1.0 - (beta1 as f64).powi(t)) as f32;
        let bc2 = (1.0 - (beta2 as f64).powi(t)) as f32;
        for (name, p) in params.iter_mut() {
            let m = self.first_moment.get_mut(name).ok_or_else(|| Error::Unknown {
                what: "optimizer slot",
                name: name.clone(),
            })?;
            let v = self.second_moment.get_mut(name).ok_or_else(|| Error::Unknown {
                what: "optimizer slot",
                name: name.clone(),
            })?;
            let g = grads.get(name);
            let p = p.data_mut();
            let (m, v) = (m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                let gi = g.map_or(0.0, |g| g.data()[i]);
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(StepOutcome::Applied)
    }
}
