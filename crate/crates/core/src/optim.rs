//! AdamW with decoupled weight decay and global-norm gradient clipping.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::graph::NodeId;
use crate::params::{ParamGrads, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug, Default)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Optimizer state over a [`ParamStore`]. Each node's values are followed by
/// its dry/wet logit in the moment vectors.
#[derive(Clone, Debug)]
pub struct AdamW {
    cfg: AdamWConfig,
    step: u64,
    state: BTreeMap<NodeId, Moments>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            step: 0,
            state: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update. Nodes without a gradient entry are treated as having a zero
    /// gradient. Non-finite parameters (logits pinned at ±∞) are left alone.
    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamGrads) {
        self.step += 1;
        let c = &self.cfg;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (id, p) in params.iter_mut() {
            let n = p.values.len() + 1;
            let st = self.state.entry(id).or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
            let g = grads.nodes.get(&id);
            let grad_at = |i: usize| -> f64 {
                match g {
                    Some(g) if i < g.values.len() => g.values[i],
                    Some(g) => g.logit,
                    None => 0.0,
                }
            };
            for i in 0..n {
                let x = if i < n - 1 { &mut p.values[i] } else { &mut p.logit };
                if !x.is_finite() {
                    continue;
                }
                let gi = grad_at(i);
                st.m[i] = c.beta1 * st.m[i] + (1.0 - c.beta1) * gi;
                st.v[i] = c.beta2 * st.v[i] + (1.0 - c.beta2) * gi * gi;
                let m_hat = st.m[i] / bc1;
                let v_hat = st.v[i] / bc2;
                *x -= c.learning_rate * (c.weight_decay * *x + m_hat / (v_hat.sqrt() + c.eps));
            }
        }
    }
}

/// Scales `grads` so that their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut ParamGrads, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm.is_finite() {
        grads.scale(max_norm / norm);
    }
    norm
}
