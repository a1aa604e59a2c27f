//! Adam, one instance per parameter group.

use serde::{Deserialize, Serialize};

use crate::nets::layers::Module;
use crate::nets::{group_of, Model};

fn default_lr() -> f64 {
    1e-3
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

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: default_lr(), beta1: default_beta1(), beta2: default_beta2(), eps: default_eps() }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<(), String> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err("adam: need lr > 0, betas in [0, 1), eps > 0".into())
        }
    }
}

/// Moment estimates of one parameter group, in parameter visit order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Adam {
    pub group: String,
    pub steps: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(group: &str) -> Self {
        Self { group: group.to_string(), ..Default::default() }
    }

    /// Updates every parameter of the group from its accumulated gradient.
    pub fn step(&mut self, model: &mut Model<f32>, cfg: &AdamConfig) {
        self.steps += 1;
        let t = self.steps as f64;
        let step = (cfg.lr * (1.0 - cfg.beta2.powf(t)).sqrt() / (1.0 - cfg.beta1.powf(t))) as f32;
        let (b1, b2, eps) = (cfg.beta1 as f32, cfg.beta2 as f32, cfg.eps as f32);
        let eps_hat = eps * (1.0 - cfg.beta2.powf(t)).sqrt() as f32;
        let mut idx = 0;
        let group = self.group.clone();
        model.visit_mut("", &mut |name, p| {
            if group_of(name) != group {
                return;
            }
            if self.m.len() == idx {
                self.m.push(vec![0.0; p.len()]);
                self.v.push(vec![0.0; p.len()]);
            }
            let (m, v) = (&mut self.m[idx], &mut self.v[idx]);
            for (((w, &g), mi), vi) in p.value.iter_mut().zip(&p.grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (1.0 - b1) * g;
                *vi = b2 * *vi + (1.0 - b2) * g * g;
                *w -= step * *mi / (vi.sqrt() + eps_hat);
            }
            idx += 1;
        });
    }
}

/// One Adam per group, stepped in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupOptimizer {
    pub cfg: AdamConfig,
    pub groups: Vec<Adam>,
}

impl GroupOptimizer {
    /// Groups in the order `2d`, `3d`, `fusion` (those present).
    pub fn new(model: &Model<f32>, cfg: AdamConfig) -> Self {
        let present: Vec<String> = model.group_sizes().into_iter().map(|(g, _)| g).collect();
        let groups = ["2d", "3d", "fusion"].iter().filter(|g| present.iter().any(|p| p == *g)).map(|g| Adam::new(g)).collect();
        Self { cfg, groups }
    }

    pub fn step(&mut self, model: &mut Model<f32>) {
        for g in &mut self.groups {
            g.step(model, &self.cfg);
        }
    }
}
