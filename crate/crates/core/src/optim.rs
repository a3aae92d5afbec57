//! Bias-corrected Adam with per-block moments and step counts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ParamGroup, Parameters};
use crate::numerics::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate {} must be positive", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("Adam epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// Moments of one parameter tensor. `step` counts the updates this block
/// has received, which is what its bias correction uses.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockState<F> {
    pub name: String,
    pub step: u64,
    pub m: Vec<F>,
    pub v: Vec<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam<F> {
    pub config: AdamConfig,
    pub blocks: Vec<BlockState<F>>,
}

impl<F: Real> Adam<F> {
    pub fn new<P: Parameters<F>>(config: AdamConfig, params: &P) -> Self {
        let mut blocks = Vec::new();
        params.visit(&mut |_, name, t| {
            blocks.push(BlockState {
                name: name.to_string(),
                step: 0,
                m: vec![F::zero(); t.len()],
                v: vec![F::zero(); t.len()],
            })
        });
        Self { config, blocks }
    }

    /// Updates every block whose group satisfies `active`. Gradients are
    /// checked for finiteness first; nothing is modified if any is bad.
    pub fn step<P: Parameters<F>>(&mut self, params: &mut P, grads: &P, active: &dyn Fn(ParamGroup) -> bool) -> Result<()> {
        let mut bad = None;
        let mut flat: Vec<Option<Vec<F>>> = Vec::with_capacity(self.blocks.len());
        grads.visit(&mut |g, name, t| {
            if !active(g) {
                flat.push(None);
                return;
            }
            if bad.is_none() && !t.all_finite() {
                bad = Some(name.to_string());
            }
            flat.push(Some(t.data().to_vec()));
        });
        if let Some(name) = bad {
            return Err(Error::NonFinite(format!("gradient of parameter block {name}")));
        }
        if flat.len() != self.blocks.len() {
            return Err(Error::dim("adam_step", "parameter blocks", self.blocks.len(), flat.len()));
        }
        let c = self.config;
        let (b1, b2) = (F::of(c.beta1), F::of(c.beta2));
        let (one, eps) = (F::one(), F::of(c.epsilon));
        let mut i = 0;
        let blocks = &mut self.blocks;
        params.visit_mut(&mut |_, _, t| {
            let state = &mut blocks[i];
            if let Some(g) = &flat[i] {
                state.step += 1;
                let bc1 = F::of(1.0 - c.beta1.powi(state.step as i32));
                let bc2 = F::of(1.0 - c.beta2.powi(state.step as i32));
                let lr = F::of(c.learning_rate);
                for (((p, &g), m), v) in t.data_mut().iter_mut().zip(g).zip(&mut state.m).zip(&mut state.v) {
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *p -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
            i += 1;
        });
        Ok(())
    }
}
