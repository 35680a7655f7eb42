use serde::{Deserialize, Serialize};

use super::ParameterStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    AdamW,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NonFinitePolicy {
    #[default]
    Fail,
    Skip,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub non_finite: NonFinitePolicy,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            non_finite: NonFinitePolicy::Fail,
        }
    }
}

/// One bias-corrected Adam/AdamW update from the stored gradients.
///
/// `adam` folds weight decay into the gradient (L2); `adamw` shrinks the
/// weights directly by `lr · weight_decay`. Returns `false` when the step was
/// skipped because of a non-finite gradient under [`NonFinitePolicy::Skip`].
pub fn adam_step(store: &mut ParameterStore, lr: f64, cfg: &AdamConfig) -> Result<bool> {
    if !store.grads_finite() {
        return match cfg.non_finite {
            NonFinitePolicy::Fail => Err(Error::Numeric("non-finite gradient in optimizer step".into())),
            NonFinitePolicy::Skip => Ok(false),
        };
    }
    for p in store.iter_mut() {
        p.steps += 1;
        let t = p.steps as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let coupled = matches!(cfg.kind, OptimizerKind::Adam) && cfg.weight_decay != 0.0;
        if matches!(cfg.kind, OptimizerKind::AdamW) && cfg.weight_decay != 0.0 {
            let shrink = 1.0 - lr * cfg.weight_decay;
            p.value.mapv_inplace(|w| w * shrink);
        }
        ndarray::Zip::from(&mut p.value)
            .and(&p.grad)
            .and(&mut p.first_moment)
            .and(&mut p.second_moment)
            .for_each(|w, &g, m, v| {
                let g = if coupled { g + cfg.weight_decay * *w } else { g };
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
            });
    }
    Ok(true)
}

/// `base_lr · decay^⌊epoch / every⌋`.
pub fn step_lr(epoch: usize, base_lr: f64, decay: f64, every: usize) -> f64 {
    base_lr * decay.powi((epoch / every.max(1)) as i32)
}
