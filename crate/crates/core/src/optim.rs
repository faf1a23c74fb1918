//! AdamW with decoupled weight decay.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::tensor::{Result, Tensor, TensorError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWHyper {
    fn default() -> Self {
        AdamWHyper {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Moment buffers keyed by parameter name.
#[derive(Clone, Debug)]
pub struct AdamWState {
    pub hyper: AdamWHyper,
    step: u64,
    m: HashMap<String, Vec<f64>>,
    v: HashMap<String, Vec<f64>>,
}

impl AdamWState {
    pub fn new(hyper: AdamWHyper) -> Result<Self> {
        if !(hyper.lr > 0.0) {
            return Err(TensorError::InvalidHyper("lr must be positive"));
        }
        if !(0.0..1.0).contains(&hyper.beta1) || !(0.0..1.0).contains(&hyper.beta2) {
            return Err(TensorError::InvalidHyper("betas must lie in [0, 1)"));
        }
        if hyper.weight_decay < 0.0 || hyper.eps <= 0.0 {
            return Err(TensorError::InvalidHyper("eps and weight_decay"));
        }
        Ok(AdamWState {
            hyper,
            step: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update of every parameter that has a gradient, at the hyper
    /// learning rate and weight decay.
    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Tensor>,
        grads: &BTreeMap<String, Tensor>,
    ) -> Result<()> {
        let (lr, wd) = (self.hyper.lr, self.hyper.weight_decay);
        self.step_with(params, grads, lr, |_| wd)
    }

    /// One update with an explicit learning rate and a per-parameter decay.
    pub fn step_with(
        &mut self,
        params: &mut BTreeMap<String, Tensor>,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
        decay: impl Fn(&str) -> f64,
    ) -> Result<()> {
        if !(lr > 0.0) {
            return Err(TensorError::InvalidHyper("lr must be positive"));
        }
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| TensorError::UnboundLeaf(name.clone()))?;
            if p.shape() != g.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "adamw_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
        }
        self.step += 1;
        let h = &self.hyper;
        let bc1 = 1.0 - h.beta1.powi(self.step as i32);
        let bc2 = 1.0 - h.beta2.powi(self.step as i32);
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            let n = p.len();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let shrink = 1.0 - lr * decay(name);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = h.beta1 * *mi + (1.0 - h.beta1) * gi;
                *vi = h.beta2 * *vi + (1.0 - h.beta2) * gi * gi;
                let update = (*mi / bc1) / ((*vi / bc2).sqrt() + h.eps);
                *w = *w * shrink - lr * update;
            }
        }
        Ok(())
    }
}
