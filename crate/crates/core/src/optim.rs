//! Adam with decoupled weight decay and a step-decay learning-rate schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParameterStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Iterations at which the learning rate is multiplied by `factor`.
    pub milestones: Vec<usize>,
    pub factor: f64,
    pub iterations: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
            milestones: vec![8000, 9000],
            factor: 0.1,
            iterations: 10_000,
        }
    }
}

impl OptimizerConfig {
    /// Short toy schedule: 200 iterations with the milestones at the same
    /// fractions (0.8, 0.9) as the full schedule.
    pub fn desk() -> Self {
        Self { lr: 1e-3, milestones: vec![160, 180], iterations: 200, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.factor > 0.0
            && self.milestones.windows(2).all(|w| w[0] < w[1]);
        if !ok {
            return Err(Error::Config(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }

    /// Learning rate used by the update at 0-based iteration `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| step >= m).count();
        self.lr * self.factor.powi(passed as i32)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamW {
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

/// One scalar update; returns `(p, m, v)`.
pub fn adamw_scalar(p: f64, g: f64, m: f64, v: f64, step: u64, lr: f64, cfg: &OptimizerConfig) -> (f64, f64, f64) {
    let m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
    let v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
    let m_hat = m / (1.0 - cfg.beta1.powi(step as i32));
    let v_hat = v / (1.0 - cfg.beta2.powi(step as i32));
    let p = p - lr * cfg.weight_decay * p;
    (p - lr * m_hat / (v_hat.sqrt() + cfg.eps), m, v)
}

impl AdamW {
    /// Applies the stored gradients of every parameter.
    pub fn update(&mut self, store: &mut ParameterStore, lr: f64, cfg: &OptimizerConfig) -> Result<()> {
        self.step += 1;
        let names: Vec<String> = store.names().map(str::to_string).collect();
        for name in names {
            let Some(g) = store.grad(&name).cloned() else { continue };
            let p = store.get(&name).expect("name from store").clone();
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
            if m.shape() != p.shape() || v.shape() != p.shape() || g.shape() != p.shape() {
                return Err(Error::Dimension(format!("optimizer state for `{name}` has the wrong shape")));
            }
            let mut out = p.clone();
            for i in 0..p.numel() {
                let (pi, mi, vi) = adamw_scalar(p.data()[i], g.data()[i], m.data()[i], v.data()[i], self.step, lr, cfg);
                out.data_mut()[i] = pi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
            }
            store.set(&name, out)?;
        }
        Ok(())
    }

    /// Checkpoint records under `adam.m.*`, `adam.v.*` and `adam.step`.
    pub fn records(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (k, t) in &self.m {
            out.insert(format!("adam.m.{k}"), t.clone());
        }
        for (k, t) in &self.v {
            out.insert(format!("adam.v.{k}"), t.clone());
        }
        out.insert("adam.step".into(), Tensor::scalar(self.step as f64));
        out
    }

    pub fn from_records(records: &BTreeMap<String, Tensor>) -> Self {
        let mut s = Self::default();
        for (k, t) in records {
            if let Some(n) = k.strip_prefix("adam.m.") {
                s.m.insert(n.to_string(), t.clone());
            } else if let Some(n) = k.strip_prefix("adam.v.") {
                s.v.insert(n.to_string(), t.clone());
            } else if k == "adam.step" {
                s.step = t.item() as u64;
            }
        }
        s
    }

    pub fn round_f32(&mut self) {
        for t in self.m.values_mut().chain(self.v.values_mut()) {
            crate::nn::checkpoint::round_f32(t);
        }
    }
}
