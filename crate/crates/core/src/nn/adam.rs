use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::layers::Module;
use super::Float;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates of one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<Float>,
    pub v: Vec<Float>,
    pub t: u64,
}

/// Adam with bias correction. Moments are keyed by parameter name, so a
/// parameter added after growth starts its own count at `t = 0`.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub hyper: AdamHyper,
    pub state: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            hyper: AdamHyper::default(),
            state: BTreeMap::new(),
        }
    }

    /// Applies one update to every parameter of `net`, then zeroes gradients.
    pub fn step(&mut self, net: &mut dyn Module) -> Result<()> {
        let mut bad = None;
        net.visit_params(&mut |p| {
            if bad.is_none() && p.grad.iter().any(|g| !g.is_finite()) {
                bad = Some(p.name.clone());
            }
        });
        if let Some(name) = bad {
            return Err(Error::Numeric(format!("non-finite gradient in parameter {name}")));
        }
        let AdamHyper { beta1, beta2, eps } = self.hyper;
        let lr = self.lr;
        let state = &mut self.state;
        net.visit_params_mut(&mut |p| {
            let mom = state.entry(p.name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; p.numel()],
                v: vec![0.0; p.numel()],
                t: 0,
            });
            mom.t += 1;
            let c1 = 1.0 - beta1.powi(mom.t as i32);
            let c2 = 1.0 - beta2.powi(mom.t as i32);
            for i in 0..p.value.len() {
                let g = p.grad[i] as f64;
                let m = beta1 * mom.m[i] as f64 + (1.0 - beta1) * g;
                let v = beta2 * mom.v[i] as f64 + (1.0 - beta2) * g * g;
                mom.m[i] = m as Float;
                mom.v[i] = v as Float;
                let delta = lr * (m / c1) / ((v / c2).sqrt() + eps);
                p.value[i] = (p.value[i] as f64 - delta) as Float;
            }
            p.zero_grad();
        });
        Ok(())
    }
}
