use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

const MOMENT_FLOOR: f64 = 1e-200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub weight_decay: f64,
    /// Shrink weights directly instead of adding `wd · w` to the gradient.
    #[serde(default)]
    pub decoupled: bool,
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_eps() -> f64 {
    1e-8
}

impl AdamConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamConfig {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay,
            decoupled: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|p| vec![0.0; p.value.len()]).collect();
        AdamState {
            config,
            first: zeros(),
            second: zeros(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update; `grads[i]` belongs to the i-th stored parameter.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) -> Result<()> {
        if grads.len() != store.len() || self.first.len() != store.len() {
            return Err(Error::Contract(format!(
                "{} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        for (p, g) in store.iter().zip(grads) {
            match g {
                None => {
                    return Err(Error::Contract(format!(
                        "missing gradient for trainable parameter {}",
                        p.name
                    )))
                }
                Some(g) if g.shape() != p.value.shape() => {
                    return Err(Error::shape("adam gradient", p.value.shape(), g.shape()))
                }
                Some(_) => {}
            }
        }

        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (((p, g), m), v) in store
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            let g = g.as_ref().expect("checked above").data();
            let w = p.value.data_mut();
            for i in 0..w.len() {
                let mut gi = g[i];
                if !c.decoupled {
                    gi += c.weight_decay * w[i];
                }
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                // Moments of dead units decay geometrically into subnormals,
                // which are very slow to compute with and carry no signal.
                if m[i].abs() < MOMENT_FLOOR {
                    m[i] = 0.0;
                }
                if v[i] < MOMENT_FLOOR {
                    v[i] = 0.0;
                }
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                if c.decoupled {
                    w[i] -= c.lr * c.weight_decay * w[i];
                }
                w[i] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}
