//! Parameter updates: Adam and plain SGD, with per-group learning-rate
//! multipliers resolved against the network's layer groups.

use std::str::FromStr;

use crate::error::{Error, Result};
use crate::models::LRMultiplierScheme;
use crate::nn::Network;

/// Update rule selection. Adam uses the conventional moment decays
/// (0.9 / 0.999) and epsilon 1e-8; vanilla SGD is plain gradient descent
/// with no momentum and no weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    VanillaSgd,
}

impl FromStr for OptimizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "adam" => Ok(OptimizerKind::Adam),
            "vanilla_sgd" | "sgd" => Ok(OptimizerKind::VanillaSgd),
            other => Err(Error::Train(format!("unknown optimizer {other:?}"))),
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::VanillaSgd => "vanilla_sgd",
        })
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Effective learning rate of one layer group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupLr {
    pub group: String,
    pub multiplier: f64,
    pub effective_lr: f64,
}

/// Optimizer state bound to one network's parameter list (in visit
/// order). Each parameter tensor updates at `base_lr * multiplier` of its
/// group.
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub base_lr: f64,
    multipliers: Vec<f64>, // one per parameter tensor, visit order
    group_lrs: Vec<GroupLr>,
    adam_m: Vec<Vec<f64>>,
    adam_v: Vec<Vec<f64>>,
    step_count: u64,
}

impl Optimizer {
    /// Resolves the multiplier scheme against the network. With no scheme
    /// every group trains at multiplier 1.
    pub fn new(
        kind: OptimizerKind,
        base_lr: f64,
        net: &Network,
        scheme: Option<&LRMultiplierScheme>,
    ) -> Result<Self> {
        if base_lr <= 0.0 {
            return Err(Error::Train(format!("base_lr {base_lr} must be positive")));
        }
        if let Some(s) = scheme {
            s.validate_coverage(net)?;
        }
        let mut multipliers = Vec::new();
        let mut sizes = Vec::new();
        net.visit_params(&mut |p| {
            let m = match scheme {
                Some(s) => s.multiplier_for(&p.group).unwrap_or(1.0),
                None => 1.0,
            };
            multipliers.push(m);
            sizes.push(p.len());
        });
        let group_lrs = net
            .groups()
            .into_iter()
            .map(|g| {
                let multiplier = match scheme {
                    Some(s) => s.multiplier_for(&g).unwrap_or(1.0),
                    None => 1.0,
                };
                GroupLr {
                    effective_lr: base_lr * multiplier,
                    group: g,
                    multiplier,
                }
            })
            .collect();
        let (adam_m, adam_v) = match kind {
            OptimizerKind::Adam => (
                sizes.iter().map(|&n| vec![0.0; n]).collect(),
                sizes.iter().map(|&n| vec![0.0; n]).collect(),
            ),
            OptimizerKind::VanillaSgd => (Vec::new(), Vec::new()),
        };
        Ok(Optimizer {
            kind,
            base_lr,
            multipliers,
            group_lrs,
            adam_m,
            adam_v,
            step_count: 0,
        })
    }

    /// One update over all parameters using their accumulated gradients.
    pub fn step(&mut self, net: &mut Network) {
        self.step_count += 1;
        let t = self.step_count;
        let mut idx = 0usize;
        match self.kind {
            OptimizerKind::VanillaSgd => {
                let base = self.base_lr;
                let mults = &self.multipliers;
                net.visit_params_mut(&mut |p| {
                    let lr = base * mults[idx];
                    idx += 1;
                    if lr == 0.0 {
                        return;
                    }
                    let grad = match p.grad.take() {
                        Some(g) => g,
                        None => return,
                    };
                    p.values.zip_mut_with(&grad, |v, &g| *v -= lr * g);
                    p.grad = Some(grad);
                });
            }
            OptimizerKind::Adam => {
                let base = self.base_lr;
                let mults = &self.multipliers;
                let ms = &mut self.adam_m;
                let vs = &mut self.adam_v;
                let bias1 = 1.0 - ADAM_BETA1.powi(t as i32);
                let bias2 = 1.0 - ADAM_BETA2.powi(t as i32);
                net.visit_params_mut(&mut |p| {
                    let lr = base * mults[idx];
                    let m = &mut ms[idx];
                    let v = &mut vs[idx];
                    idx += 1;
                    let grad = match &p.grad {
                        Some(g) => g,
                        None => return,
                    };
                    let grad = grad.as_slice().unwrap().to_vec();
                    let values = p.values.as_slice_mut().unwrap();
                    for i in 0..values.len() {
                        let g = grad[i];
                        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
                        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
                        if lr != 0.0 {
                            let m_hat = m[i] / bias1;
                            let v_hat = v[i] / bias2;
                            values[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                        }
                    }
                });
            }
        }
    }

    /// (group, multiplier, effective lr) per layer group.
    pub fn group_lrs(&self) -> &[GroupLr] {
        &self.group_lrs
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Serializes moment vectors for checkpointing (Adam only).
    pub fn state_tensors(&self) -> Vec<(String, Vec<f64>)> {
        let mut out = Vec::new();
        for (i, m) in self.adam_m.iter().enumerate() {
            out.push((format!("optim.m.{i}"), m.clone()));
        }
        for (i, v) in self.adam_v.iter().enumerate() {
            out.push((format!("optim.v.{i}"), v.clone()));
        }
        out
    }

    pub fn restore_state(&mut self, tensors: &[(String, Vec<f64>)], step_count: u64) {
        for (name, data) in tensors {
            if let Some(idx) = name.strip_prefix("optim.m.").and_then(|s| s.parse::<usize>().ok()) {
                if idx < self.adam_m.len() && self.adam_m[idx].len() == data.len() {
                    self.adam_m[idx].clone_from(data);
                }
            } else if let Some(idx) =
                name.strip_prefix("optim.v.").and_then(|s| s.parse::<usize>().ok())
            {
                if idx < self.adam_v.len() && self.adam_v[idx].len() == data.len() {
                    self.adam_v[idx].clone_from(data);
                }
            }
        }
        self.step_count = step_count;
    }
}
