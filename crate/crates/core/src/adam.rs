//! Bias-corrected Adam over named parameters.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::nn::{Param, Params};
use crate::tape::Gradients;
use crate::tensor::Element;

#[derive(Clone, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

struct Slot<E> {
    m: Vec<E>,
    v: Vec<E>,
}

pub struct Adam<E: Element> {
    pub config: AdamConfig,
    step: u64,
    slots: HashMap<String, Slot<E>>,
}

impl<E: Element> Adam<E> {
    pub fn new(config: AdamConfig) -> Result<Self> {
        if !(0.0..1.0).contains(&config.beta1) || !(0.0..1.0).contains(&config.beta2) {
            return Err(Error::Config {
                what: "adam betas must lie in (0, 1)".into(),
            });
        }
        if config.eps <= 0.0 {
            return Err(Error::Config {
                what: "adam eps must be positive".into(),
            });
        }
        Ok(Adam {
            config,
            step: 0,
            slots: HashMap::new(),
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update over every parameter of `target`, reading gradients by name.
    /// Parameters without a gradient entry are left untouched.
    pub fn step<M: Params<E>>(&mut self, target: &mut M, grads: &Gradients<E>) {
        self.step += 1;
        let t = self.step as i32;
        let b1 = E::from_f64(self.config.beta1);
        let b2 = E::from_f64(self.config.beta2);
        let lr = E::from_f64(self.config.lr);
        let eps = E::from_f64(self.config.eps);
        let corr1 = E::one() / (E::one() - b1.powi(t));
        let corr2 = E::one() / (E::one() - b2.powi(t));

        let slots = &mut self.slots;
        target.visit_mut(&mut |p: &mut Param<E>| {
            let Some(grad) = grads.get(&p.name) else {
                return;
            };
            let n = p.value.numel();
            let slot = slots.entry(p.name.clone()).or_insert_with(|| Slot {
                m: vec![E::zero(); n],
                v: vec![E::zero(); n],
            });
            let values = p.value.data_mut();
            for (i, &g) in grad.data().iter().enumerate() {
                slot.m[i] = b1 * slot.m[i] + (E::one() - b1) * g;
                slot.v[i] = b2 * slot.v[i] + (E::one() - b2) * g * g;
                let m_hat = slot.m[i] * corr1;
                let v_hat = slot.v[i] * corr2;
                values[i] = values[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        });
    }
}
