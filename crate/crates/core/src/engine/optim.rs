use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::engine::network::{Grads, Network};
use crate::error::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum OptimizerKind {
    Sgd {
        lr: f64,
        #[serde(default)]
        momentum: f64,
        #[serde(default)]
        weight_decay: f64,
    },
    Adam {
        lr: f64,
    },
}

impl OptimizerKind {
    pub fn base_lr(&self) -> f64 {
        match self {
            OptimizerKind::Sgd { lr, .. } | OptimizerKind::Adam { lr } => *lr,
        }
    }
}

/// How a network is trained: schedule, batching, optimizer and seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainPolicy {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    /// Epochs (0-based) at which the learning rate is multiplied by `lr_drop_factor`.
    #[serde(default)]
    pub lr_milestones: Vec<usize>,
    #[serde(default = "default_drop")]
    pub lr_drop_factor: f64,
    pub seed: u64,
}

fn default_drop() -> f64 {
    0.1
}

impl TrainPolicy {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Policy(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr_drop_factor > 0.0 && self.lr_drop_factor <= 1.0) {
            return bad(format!("lr_drop_factor {} outside (0, 1]", self.lr_drop_factor));
        }
        if self.lr_milestones.windows(2).any(|w| w[0] >= w[1]) {
            return bad("milestones must be strictly increasing".into());
        }
        if self.lr_milestones.last().is_some_and(|&m| m >= self.epochs) {
            return bad("milestones must be below the epoch count".into());
        }
        let lr = self.optimizer.base_lr();
        if !(lr > 0.0 && lr.is_finite()) {
            return bad(format!("learning rate {lr} must be positive"));
        }
        if let OptimizerKind::Sgd {
            momentum,
            weight_decay,
            ..
        } = self.optimizer
        {
            if !(0.0..1.0).contains(&momentum) || weight_decay < 0.0 {
                return bad("momentum must be in [0, 1) and weight_decay ≥ 0".into());
            }
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.lr_milestones.iter().filter(|&&m| m <= epoch).count();
        self.optimizer.base_lr() * self.lr_drop_factor.powi(drops as i32)
    }
}

/// Optimizer state, keyed by `(layer id, parameter name)`.
pub struct Optimizer {
    kind: OptimizerKind,
    first: BTreeMap<(String, String), Vec<f64>>,
    second: BTreeMap<(String, String), Vec<f64>>,
    steps: i32,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Optimizer {
            kind,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
            steps: 0,
        }
    }

    pub fn step(&mut self, net: &mut Network, grads: &Grads, lr: f64) {
        self.steps += 1;
        for (layer, map) in grads {
            for (name, g) in map {
                let key = (layer.clone(), name.clone());
                let Some(param) = net.param_mut(layer, name) else {
                    continue;
                };
                let w = param.data_mut();
                let g = g.data();
                match self.kind {
                    OptimizerKind::Sgd {
                        momentum,
                        weight_decay,
                        ..
                    } => {
                        let v = self.first.entry(key).or_insert_with(|| vec![0.0; w.len()]);
                        for i in 0..w.len() {
                            let d = g[i] + weight_decay * w[i];
                            v[i] = momentum * v[i] + d;
                            w[i] -= lr * v[i];
                        }
                    }
                    OptimizerKind::Adam { .. } => {
                        let m = self.first.entry(key.clone()).or_insert_with(|| vec![0.0; w.len()]);
                        let v = self.second.entry(key).or_insert_with(|| vec![0.0; w.len()]);
                        let c1 = 1.0 - ADAM_BETA1.powi(self.steps);
                        let c2 = 1.0 - ADAM_BETA2.powi(self.steps);
                        for i in 0..w.len() {
                            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
                            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                            w[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn policy(milestones: Vec<usize>) -> TrainPolicy {
        TrainPolicy {
            epochs: 5,
            batch_size: 4,
            optimizer: OptimizerKind::Sgd {
                lr: 0.1,
                momentum: 0.9,
                weight_decay: 0.0,
            },
            lr_milestones: milestones,
            lr_drop_factor: 0.1,
            seed: 0,
        }
    }

    #[test]
    fn milestone_drop() {
        let p = policy(vec![2]);
        assert_eq!(p.lr_at(0), 0.1);
        assert_eq!(p.lr_at(1), 0.1);
        assert!((p.lr_at(3) - 0.01).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_milestones() {
        assert!(policy(vec![3, 2]).validate().is_err());
        assert!(policy(vec![5]).validate().is_err());
        assert!(policy(vec![1, 4]).validate().is_ok());
    }
}
