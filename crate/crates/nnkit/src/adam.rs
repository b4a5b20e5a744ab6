use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::param::ParamSet;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of a flat block. `t` is the 1-based step.
pub fn adam_update<T: Scalar>(
    value: &mut [T],
    grad: &[T],
    m: &mut [T],
    v: &mut [T],
    cfg: &AdamConfig,
    t: u64,
) {
    debug_assert!(t >= 1);
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let bc1 = T::of(1.0 - cfg.beta1.powi(t as i32));
    let bc2 = T::of(1.0 - cfg.beta2.powi(t as i32));
    let lr = T::of(cfg.lr);
    let eps = T::of(cfg.eps);
    for i in 0..value.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + (T::one() - b1) * g;
        v[i] = b2 * v[i] + (T::one() - b2) * g * g;
        let mh = m[i] / bc1;
        let vh = v[i] / bc2;
        value[i] -= lr * mh / (vh.sqrt() + eps);
    }
}

/// Adam over a whole [`ParamSet`], using the gradients accumulated in it.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam { config, t: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Applies one update. Fails without touching any parameter if a
    /// gradient is non-finite. Gradients are left in place.
    pub fn step<T: Scalar>(&mut self, ps: &mut ParamSet<T>) -> Result<()> {
        for (_, p) in ps.iter() {
            if !p.grad.all_finite() {
                return Err(NnError::NonFiniteGradient(p.name.clone()));
            }
        }
        self.t += 1;
        let ids: Vec<_> = ps.ids().collect();
        for id in ids {
            let p = ps.get_mut(id);
            let value = std::sync::Arc::make_mut(&mut p.value);
            adam_update(
                value.data_mut(),
                p.grad.data(),
                &mut p.m,
                &mut p.v,
                &self.config,
                self.t,
            );
        }
        Ok(())
    }
}
