use std::collections::BTreeMap;

use ndarray::{ArrayD, Zip};
use serde::{Deserialize, Serialize};

use super::{cast, Parameterized, Real};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// β₁ = 0, β₂ = 0.99, the usual choice for adversarial training.
    pub fn adversarial(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.0,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamSlot<T> {
    pub m: ArrayD<T>,
    pub v: ArrayD<T>,
    pub step: u64,
}

/// Adam with bias correction. Moments and step counts are kept per
/// parameter name so one optimizer can be stepped over different subsets of
/// parameters.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub slots: BTreeMap<String, AdamSlot<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            slots: BTreeMap::new(),
        }
    }

    /// Updates every trainable parameter of `module` from its accumulated
    /// gradient. Parameter names are prefixed with `prefix`.
    pub fn step(&mut self, module: &mut (impl Parameterized<T> + ?Sized), prefix: &str) {
        let cfg = self.config;
        let slots = &mut self.slots;
        module.visit_mut(prefix, &mut |name, p| {
            if !p.trainable {
                return;
            }
            let slot = slots.entry(name.to_string()).or_insert_with(|| AdamSlot {
                m: ArrayD::zeros(p.value.raw_dim()),
                v: ArrayD::zeros(p.value.raw_dim()),
                step: 0,
            });
            slot.step += 1;
            let t = slot.step as i32;
            let b1: T = cast(cfg.beta1);
            let b2: T = cast(cfg.beta2);
            let one = T::one();
            let c1: T = cast(1.0 - cfg.beta1.powi(t));
            let c2: T = cast(1.0 - cfg.beta2.powi(t));
            let lr: T = cast(cfg.lr);
            let eps: T = cast(cfg.eps);
            Zip::from(&mut p.value)
                .and(&p.grad)
                .and(&mut slot.m)
                .and(&mut slot.v)
                .for_each(|w, &g, m, v| {
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    let mhat = *m / c1;
                    let vhat = *v / c2;
                    *w -= lr * mhat / (vhat.sqrt() + eps);
                });
        });
    }
}
