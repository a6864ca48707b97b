//! Adam optimizer with per-parameter moment state.
//!
//! Parameters are addressed by name so the trainer can route each loss to its
//! own subset of parameter groups; a parameter's step counter only advances
//! when that parameter actually receives an update.

use crate::nn::ParamEntry;
use crate::scalar::Scalar;
use ndarray::ArrayD;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

struct State<T: Scalar> {
    m: ArrayD<T>,
    v: ArrayD<T>,
    t: u64,
}

pub struct Adam<T: Scalar> {
    beta1: T,
    beta2: T,
    eps: T,
    states: BTreeMap<String, State<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            beta1: T::cast(cfg.beta1),
            beta2: T::cast(cfg.beta2),
            eps: T::cast(cfg.eps),
            states: BTreeMap::new(),
        }
    }

    /// Apply one bias-corrected Adam update to every trainable entry that has
    /// a gradient. Entries without a gradient are left untouched.
    pub fn step(&mut self, lr: T, params: &[ParamEntry<T>]) {
        let one = T::one();
        for entry in params {
            if !entry.trainable {
                continue;
            }
            let Some(grad) = entry.tensor.grad() else {
                continue;
            };
            let state = self.states.entry(entry.name.clone()).or_insert_with(|| State {
                m: ArrayD::zeros(grad.raw_dim()),
                v: ArrayD::zeros(grad.raw_dim()),
                t: 0,
            });
            state.t += 1;
            let (b1, b2) = (self.beta1, self.beta2);
            state.m.zip_mut_with(&grad, |m, &g| *m = b1 * *m + (one - b1) * g);
            state.v.zip_mut_with(&grad, |v, &g| *v = b2 * *v + (one - b2) * g * g);
            let corr1 = one - b1.powi(state.t as i32);
            let corr2 = one - b2.powi(state.t as i32);
            let eps = self.eps;
            entry.tensor.update_data(|data| {
                ndarray::Zip::from(data)
                    .and(&state.m)
                    .and(&state.v)
                    .for_each(|w, &m, &v| {
                        let mhat = m / corr1;
                        let vhat = v / corr2;
                        *w = *w - lr * mhat / (vhat.sqrt() + eps);
                    });
            });
        }
    }
}
