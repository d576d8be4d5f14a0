//! Adam with coupled L2 weight decay.

use serde::{Deserialize, Serialize};

use crate::nn::{Grads, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Added to the gradient as `weight_decay * theta`.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

/// First and second moments for one flat parameter block.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamMoments {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamMoments {
    pub fn new(len: usize) -> Self {
        AdamMoments {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update of `params` in place.
    pub fn update(&mut self, cfg: &AdamConfig, params: &mut [f64], grads: &[f64]) {
        assert_eq!(
            params.len(),
            grads.len(),
            "parameter/gradient length mismatch"
        );
        if self.m.len() != params.len() {
            *self = Self::new(params.len());
        }
        self.step += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.step as i32);
        let c2 = 1.0 - cfg.beta2.powi(self.step as i32);
        for k in 0..params.len() {
            let g = grads[k] + cfg.weight_decay * params[k];
            self.m[k] = cfg.beta1 * self.m[k] + (1.0 - cfg.beta1) * g;
            self.v[k] = cfg.beta2 * self.v[k] + (1.0 - cfg.beta2) * g * g;
            let mh = self.m[k] / c1;
            let vh = self.v[k] / c2;
            params[k] -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
}

/// Adam state for every tensor of a [`ParamStore`]. Parameters without a
/// gradient in a step are left untouched and keep their moments.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    slots: Vec<AdamMoments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            slots: Vec::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads) {
        if self.slots.len() < store.len() {
            self.slots.resize_with(store.len(), AdamMoments::default);
        }
        for id in store.ids().collect::<Vec<_>>() {
            if let Some(g) = grads.get(id) {
                let cfg = self.config;
                self.slots[id.0].update(&cfg, store.get_mut(id).data_mut(), g);
            }
        }
    }
}
