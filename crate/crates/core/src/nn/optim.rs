use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;

use super::params::{ParamGroup, ParamStore};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// First and second moment estimates for one parameter.
#[derive(Debug, Clone)]
pub struct Moments {
    pub first: Tensor,
    pub second: Tensor,
}

/// AdamW with decoupled weight decay and a learning rate per [`ParamGroup`].
#[derive(Debug, Clone)]
pub struct AdamW {
    config: AdamWConfig,
    state: BTreeMap<String, Moments>,
    steps: u64,
}

impl AdamW {
    pub fn new(store: &ParamStore, config: AdamWConfig) -> Result<Self> {
        let mut state = BTreeMap::new();
        for (name, p) in store.iter() {
            let z = p.var.as_tensor().zeros_like()?;
            state.insert(
                name.clone(),
                Moments {
                    first: z.clone(),
                    second: z,
                },
            );
        }
        Ok(Self {
            config,
            state,
            steps: 0,
        })
    }

    pub fn from_state(config: AdamWConfig, state: BTreeMap<String, Moments>, steps: u64) -> Self {
        Self {
            config,
            state,
            steps,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn state(&self) -> &BTreeMap<String, Moments> {
        &self.state
    }

    pub fn config(&self) -> AdamWConfig {
        self.config
    }

    /// Applies one update. Parameters without a gradient only decay.
    pub fn step(
        &mut self,
        store: &ParamStore,
        grads: &GradStore,
        lr: impl Fn(ParamGroup) -> f64,
    ) -> Result<()> {
        self.steps += 1;
        let c = self.config;
        let t = self.steps as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        for (name, p) in store.iter() {
            let lr = lr(p.group);
            let theta = p.var.as_tensor();
            let moments = self
                .state
                .get_mut(name)
                .ok_or_else(|| crate::Error::Contract(format!("no optimizer state for `{name}`")))?;
            let mut next = theta.clone();
            let mut changed = false;
            if p.decay && c.weight_decay > 0.0 {
                next = (next * (1.0 - lr * c.weight_decay))?;
                changed = true;
            }
            if let Some(g) = grads.get(theta) {
                changed = true;
                moments.first = ((&moments.first * c.beta1)? + (g * (1.0 - c.beta1))?)?;
                moments.second = ((&moments.second * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?;
                let m_hat = (&moments.first / bias1)?;
                let v_hat = (&moments.second / bias2)?;
                let update = m_hat.div(&(v_hat.sqrt()? + c.eps)?)?;
                next = (next - (update * lr)?)?;
            }
            if changed {
                p.var.set(&next.detach())?;
            }
        }
        Ok(())
    }
}
